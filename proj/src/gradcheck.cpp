#include "dsparse/gradcheck.hpp"

#include <cmath>

namespace dsparse {

std::vector<std::vector<double>> analytic_grad(Tape& tape,
                                               const std::function<Var()>& build_loss,
                                               const std::vector<Var>& params) {
    tape.reset();
    tape.zero_grad();
    Var loss = build_loss();
    tape.backward(loss);
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (Var p : params) {
        const auto& g = tape.grad(p);
        std::vector<double> gp(tape.size(p), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] = static_cast<double>(g[i]);
        out.push_back(std::move(gp));
    }
    tape.reset();
    tape.zero_grad();
    return out;
}

std::vector<std::vector<double>> numeric_grad(Tape& tape,
                                              const std::function<Var()>& build_loss,
                                              const std::vector<Var>& params,
                                              double eps) {
    auto eval = [&]() -> double {
        tape.reset();
        Var loss = build_loss();
        const double v = static_cast<double>(tape.values(loss)[0]);
        tape.reset();
        return v;
    };

    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (Var p : params) {
        auto& vals = tape.values(p);
        std::vector<double> gp(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const real_t orig = vals[i];
            vals[i] = orig + static_cast<real_t>(eps);
            const double fp = eval();
            vals[i] = orig - static_cast<real_t>(eps);
            const double fm = eval();
            vals[i] = orig;
            gp[i] = (fp - fm) / (2.0 * eps);
        }
        out.push_back(std::move(gp));
    }
    return out;
}

double max_rel_err(const std::vector<std::vector<double>>& analytic,
                   const std::vector<std::vector<double>>& numeric) {
    double worst = 0.0;
    for (std::size_t p = 0; p < analytic.size(); ++p)
        for (std::size_t i = 0; i < analytic[p].size(); ++i) {
            const double n = numeric[p][i];
            const double err = std::abs(analytic[p][i] - n) / std::max(1.0, std::abs(n));
            worst = std::max(worst, err);
        }
    return worst;
}

double grad_check(Tape& tape, const std::function<Var()>& build_loss,
                  const std::vector<Var>& params, double eps) {
    const auto analytic = analytic_grad(tape, build_loss, params);
    const auto numeric = numeric_grad(tape, build_loss, params, eps);
    return max_rel_err(analytic, numeric);
}

} // namespace dsparse
