#include "dsparse/train.hpp"

#include <cmath>

namespace dsparse {

void TrainConfig::validate() const {
    if (!(lr >= real_t{0})) throw ParamError("learning rate must be nonnegative");
    if (batch < 2) throw ParamError("batch size must be at least 2");
    if (!(label_smoothing >= real_t{0} && label_smoothing < real_t{1}))
        throw ParamError("label smoothing must lie in [0, 1), got " +
                         std::to_string(label_smoothing));
    if (precision != kRealName)
        throw ParamError("this binary stores arrays as " + std::string(kRealName) +
                         "; rebuild with DSPARSE_REAL32 toggled for " + precision);
}

Adam::Adam(real_t lr_, real_t beta1_, real_t beta2_, real_t eps_)
    : lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {}

void Adam::step(Tape& tape, const std::vector<NamedParam>& params) {
    if (m.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(tape.size(params[i].var), 0);
            v[i].assign(tape.size(params[i].var), 0);
        }
    }
    if (m.size() != params.size())
        throw DimError("optimizer state does not match parameter list");
    ++t;
    const real_t bc1 = real_t{1} - static_cast<real_t>(std::pow(beta1, t));
    const real_t bc2 = real_t{1} - static_cast<real_t>(std::pow(beta2, t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& vals = tape.values(params[i].var);
        if (m[i].size() != vals.size())
            throw DimError("optimizer moments have wrong size for " + params[i].name);
        const auto& grad = tape.grad(params[i].var); // may be empty
        const std::uint8_t* mask = params[i].mask ? params[i].mask->data() : nullptr;
        for (std::size_t j = 0; j < vals.size(); ++j) {
            real_t g = j < grad.size() ? grad[j] : real_t{0};
            if (mask && !mask[j]) g = 0;
            m[i][j] = beta1 * m[i][j] + (real_t{1} - beta1) * g;
            v[i][j] = beta2 * v[i][j] + (real_t{1} - beta2) * g * g;
            const real_t mhat = m[i][j] / bc1;
            const real_t vhat = v[i][j] / bc2;
            vals[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            if (mask && !mask[j]) vals[j] = 0; // masked positions stay zero forever
        }
    }
}

std::vector<real_t> smooth_labels(const std::vector<real_t>& labels,
                                  std::size_t n_cols, real_t ls) {
    if (!(ls >= real_t{0} && ls < real_t{1}))
        throw ParamError("label smoothing must lie in [0, 1), got " + std::to_string(ls));
    if (n_cols == 0 || labels.size() % n_cols != 0)
        throw DimError("label matrix size is not a multiple of the row width");
    std::vector<real_t> out(labels);
    if (ls == real_t{0}) return out;
    const real_t floor = ls / static_cast<real_t>(n_cols);
    for (auto& y : out) y = (real_t{1} - ls) * y + floor;
    return out;
}

TrainRun::TrainRun(ModelConfig mcfg, std::size_t n_entities, std::size_t n_relations,
                   TrainConfig tcfg)
    : model(mcfg, n_entities, n_relations),
      adam(tcfg.lr),
      rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL), // distinct stream from init
      train_cfg(tcfg) {}

void train_epochs(TrainRun& run, const KnowledgeGraph& kg, std::size_t epochs) {
    const TrainConfig& cfg = run.train_cfg;
    Tape& tape = run.model.tape();
    const std::vector<NamedParam> params = run.model.named_params();
    const PairIndex pairs = build_pair_index(kg.train);
    const std::size_t n_ent = kg.n_entities();

    for (std::size_t e = 0; e < epochs; ++e) {
        BatchStream stream(pairs, n_ent, cfg.batch, run.rng);
        real_t loss_sum = 0;
        std::size_t row_sum = 0, batch_no = 0;
        while (auto batch = stream.next()) {
            const std::vector<real_t> targets =
                smooth_labels(batch->labels, n_ent, cfg.label_smoothing);
            Var scores = run.model.forward(batch->subjects, batch->relations,
                                           Mode::train, run.rng);
            Var loss = tape.bce_loss(scores, targets);
            const real_t loss_val = tape.values(loss)[0];
            if (std::isnan(static_cast<double>(loss_val)))
                throw Error("training diverged: NaN loss at epoch " +
                            std::to_string(run.epoch) + ", batch " +
                            std::to_string(batch_no));
            tape.backward(loss);
            run.adam.step(tape, params);
            tape.reset();
            tape.zero_grad();
            loss_sum += loss_val * static_cast<real_t>(batch->size());
            row_sum += batch->size();
            ++batch_no;
        }
        run.history.epoch_loss.push_back(loss_sum / static_cast<real_t>(row_sum));
        ++run.epoch;
        if (cfg.eval_every && run.epoch % cfg.eval_every == 0 && !kg.valid.empty())
            run.history.valid_reports.emplace_back(
                run.epoch, evaluate(run.model, kg, Split::valid));
    }
}

TrainRun train_run(const ModelConfig& model_cfg, const KnowledgeGraph& kg,
                   const TrainConfig& train_cfg) {
    train_cfg.validate();
    ModelConfig mcfg = model_cfg;
    mcfg.seed = train_cfg.seed; // one seed drives init, shuffling and dropout
    TrainRun run(mcfg, kg.n_entities(), kg.n_relations(), train_cfg);
    train_epochs(run, kg, train_cfg.epochs);
    return run;
}

RepeatedResult repeated_runs(std::size_t n, const ModelConfig& model_cfg,
                             const KnowledgeGraph& kg, const TrainConfig& train_cfg,
                             Split split,
                             const std::function<void(std::size_t, TrainRun&)>& save_run) {
    if (n < 1) throw ParamError("need at least one run");
    RepeatedResult result;
    for (std::size_t i = 0; i < n; ++i) {
        TrainConfig tcfg = train_cfg;
        tcfg.seed = train_cfg.seed + i;
        TrainRun run = train_run(model_cfg, kg, tcfg);
        result.reports.push_back(evaluate(run.model, kg, split));
        if (save_run) save_run(i, run);
    }
    result.aggregate = aggregate_reports(result.reports);
    return result;
}

} // namespace dsparse
