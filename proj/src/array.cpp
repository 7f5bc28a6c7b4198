#include "dsparse/array.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dsparse {

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

static std::size_t shape_numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw Error("invalid array handle");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw Error("invalid array handle");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(std::vector<std::size_t> shape, std::vector<real_t> values,
               bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.values = std::move(values);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(std::vector<std::size_t> shape, std::vector<real_t> values,
               bool requires_grad) {
    return push(std::move(shape), std::move(values), requires_grad);
}

Var Tape::constant(std::vector<std::size_t> shape, std::vector<real_t> values) {
    return push(std::move(shape), std::move(values), false);
}

void Tape::freeze() { frozen_ = nodes_.size(); }

void Tape::reset() {
    nodes_.resize(frozen_);
    rules_.clear();
}

void Tape::zero_grad() {
    for (auto& n : nodes_) {
        std::fill(n.grad.begin(), n.grad.end(), real_t{0});
    }
}

std::vector<real_t>& Tape::ensure_grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.values.size(), real_t{0});
    return n.grad;
}

std::size_t Tape::rows(Var v) const {
    const auto& s = node(v).shape;
    return s.empty() ? 1 : s[0];
}

std::size_t Tape::cols(Var v) const {
    const auto& s = node(v).shape;
    return s.size() < 2 ? 1 : s[1];
}

void Tape::check_2d(Var v, const char* op) const {
    if (node(v).shape.size() != 2)
        throw DimError(std::string(op) + ": expected rank-2 array, got " +
                       shape_str(node(v).shape));
}

void Tape::backward(Var loss) {
    if (size(loss) != 1)
        throw DimError("backward: loss must be scalar, got " +
                       shape_str(node(loss).shape));
    ensure_grad(loss.id)[0] += real_t{1};
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)(*this);
}

// ---------------------------------------------------------------------------
// ops

Var Tape::matmul(Var a, Var b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const std::size_t m = rows(a), n = cols(a), p = cols(b);
    if (rows(b) != n)
        throw DimError("matmul: inner dimensions disagree, " +
                       shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    std::vector<real_t> out(m * p, 0);
    {
        const auto& av = values(a);
        const auto& bv = values(b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < n; ++k) {
                const real_t aik = av[i * n + k];
                if (aik == real_t{0}) continue;
                for (std::size_t j = 0; j < p; ++j)
                    out[i * p + j] += aik * bv[k * p + j];
            }
    }
    Var c = push({m, p}, std::move(out), requires_grad(a) || requires_grad(b));
    if (node(c).requires_grad) {
        record([a, b, c, m, n, p](Tape& tp) {
            const auto& gc = tp.ensure_grad(c.id);
            if (tp.requires_grad(a)) {
                auto& ga = tp.ensure_grad(a.id);
                const auto& bv = tp.values(b);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const real_t g = gc[i * p + j];
                        if (g == real_t{0}) continue;
                        for (std::size_t k = 0; k < n; ++k)
                            ga[i * n + k] += g * bv[k * p + j];
                    }
            }
            if (tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                const auto& av = tp.values(a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t k = 0; k < n; ++k) {
                        const real_t aik = av[i * n + k];
                        if (aik == real_t{0}) continue;
                        for (std::size_t j = 0; j < p; ++j)
                            gb[k * p + j] += aik * gc[i * p + j];
                    }
            }
        });
    }
    return c;
}

Var Tape::matmul_nt(Var a, Var b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    const std::size_t m = rows(a), n = cols(a), p = rows(b);
    if (cols(b) != n)
        throw DimError("matmul_nt: inner dimensions disagree, " +
                       shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    std::vector<real_t> out(m * p, 0);
    {
        const auto& av = values(a);
        const auto& bv = values(b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
                real_t acc = 0;
                const real_t* ar = av.data() + i * n;
                const real_t* br = bv.data() + j * n;
                for (std::size_t k = 0; k < n; ++k) acc += ar[k] * br[k];
                out[i * p + j] = acc;
            }
    }
    Var c = push({m, p}, std::move(out), requires_grad(a) || requires_grad(b));
    if (node(c).requires_grad) {
        record([a, b, c, m, n, p](Tape& tp) {
            const auto& gc = tp.ensure_grad(c.id);
            if (tp.requires_grad(a)) {
                auto& ga = tp.ensure_grad(a.id);
                const auto& bv = tp.values(b);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const real_t g = gc[i * p + j];
                        if (g == real_t{0}) continue;
                        const real_t* br = bv.data() + j * n;
                        real_t* gr = ga.data() + i * n;
                        for (std::size_t k = 0; k < n; ++k) gr[k] += g * br[k];
                    }
            }
            if (tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                const auto& av = tp.values(a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const real_t g = gc[i * p + j];
                        if (g == real_t{0}) continue;
                        const real_t* ar = av.data() + i * n;
                        real_t* gr = gb.data() + j * n;
                        for (std::size_t k = 0; k < n; ++k) gr[k] += g * ar[k];
                    }
            }
        });
    }
    return c;
}

Var Tape::linear(Var x, Var w, Var b, const std::vector<std::uint8_t>* mask) {
    check_2d(x, "linear");
    check_2d(w, "linear");
    const std::size_t batch = rows(x), in = cols(x), out_dim = rows(w);
    if (cols(w) != in)
        throw DimError("linear: input width disagrees with weight, " +
                       shape_str(shape(x)) + " vs " + shape_str(shape(w)));
    if (mask && mask->size() != in * out_dim)
        throw DimError("linear: mask size does not match weight shape");
    if (b.valid() && size(b) != out_dim)
        throw DimError("linear: bias size does not match output width");

    std::vector<real_t> outv(batch * out_dim, 0);
    {
        const auto& xv = values(x);
        const auto& wv = values(w);
        const std::uint8_t* mk = mask ? mask->data() : nullptr;
        for (std::size_t r = 0; r < batch; ++r) {
            const real_t* xr = xv.data() + r * in;
            for (std::size_t o = 0; o < out_dim; ++o) {
                const real_t* wr = wv.data() + o * in;
                real_t acc = 0;
                if (mk) {
                    const std::uint8_t* mr = mk + o * in;
                    for (std::size_t i = 0; i < in; ++i)
                        if (mr[i]) acc += xr[i] * wr[i];
                } else {
                    for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
                }
                outv[r * out_dim + o] = acc;
            }
        }
        if (b.valid()) {
            const auto& bv = values(b);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t o = 0; o < out_dim; ++o)
                    outv[r * out_dim + o] += bv[o];
        }
    }
    bool rg = requires_grad(x) || requires_grad(w) || (b.valid() && requires_grad(b));
    Var y = push({batch, out_dim}, std::move(outv), rg);
    if (rg) {
        record([x, w, b, y, mask, batch, in, out_dim](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            const std::uint8_t* mk = mask ? mask->data() : nullptr;
            if (tp.requires_grad(x)) {
                auto& gx = tp.ensure_grad(x.id);
                const auto& wv = tp.values(w);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const real_t g = gy[r * out_dim + o];
                        if (g == real_t{0}) continue;
                        const real_t* wr = wv.data() + o * in;
                        real_t* gr = gx.data() + r * in;
                        if (mk) {
                            const std::uint8_t* mr = mk + o * in;
                            for (std::size_t i = 0; i < in; ++i)
                                if (mr[i]) gr[i] += g * wr[i];
                        } else {
                            for (std::size_t i = 0; i < in; ++i) gr[i] += g * wr[i];
                        }
                    }
            }
            if (tp.requires_grad(w)) {
                auto& gw = tp.ensure_grad(w.id);
                const auto& xv = tp.values(x);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const real_t g = gy[r * out_dim + o];
                        if (g == real_t{0}) continue;
                        const real_t* xr = xv.data() + r * in;
                        real_t* gr = gw.data() + o * in;
                        if (mk) {
                            const std::uint8_t* mr = mk + o * in;
                            for (std::size_t i = 0; i < in; ++i)
                                if (mr[i]) gr[i] += g * xr[i];
                        } else {
                            for (std::size_t i = 0; i < in; ++i) gr[i] += g * xr[i];
                        }
                    }
            }
            if (b.valid() && tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t o = 0; o < out_dim; ++o)
                        gb[o] += gy[r * out_dim + o];
            }
        });
    }
    return y;
}

Var Tape::add(Var a, Var b) {
    if (shape(a) != shape(b))
        throw DimError("add: shape mismatch, " + shape_str(shape(a)) + " vs " +
                       shape_str(shape(b)));
    std::vector<real_t> out(values(a));
    const auto& bv = values(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    Var c = push(shape(a), std::move(out), requires_grad(a) || requires_grad(b));
    if (node(c).requires_grad) {
        record([a, b, c](Tape& tp) {
            const auto& gc = tp.ensure_grad(c.id);
            if (tp.requires_grad(a)) {
                auto& ga = tp.ensure_grad(a.id);
                for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
            }
            if (tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                for (std::size_t i = 0; i < gc.size(); ++i) gb[i] += gc[i];
            }
        });
    }
    return c;
}

Var Tape::mul(Var a, Var b) {
    if (shape(a) != shape(b))
        throw DimError("mul: shape mismatch, " + shape_str(shape(a)) + " vs " +
                       shape_str(shape(b)));
    std::vector<real_t> out(values(a));
    const auto& bv = values(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    Var c = push(shape(a), std::move(out), requires_grad(a) || requires_grad(b));
    if (node(c).requires_grad) {
        record([a, b, c](Tape& tp) {
            const auto& gc = tp.ensure_grad(c.id);
            if (tp.requires_grad(a)) {
                auto& ga = tp.ensure_grad(a.id);
                const auto& bv2 = tp.values(b);
                for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] * bv2[i];
            }
            if (tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                const auto& av2 = tp.values(a);
                for (std::size_t i = 0; i < gc.size(); ++i) gb[i] += gc[i] * av2[i];
            }
        });
    }
    return c;
}

Var Tape::scale(Var x, real_t c) {
    std::vector<real_t> out(values(x));
    for (auto& v : out) v *= c;
    Var y = push(shape(x), std::move(out), requires_grad(x));
    if (requires_grad(x)) {
        record([x, y, c](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            auto& gx = tp.ensure_grad(x.id);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
        });
    }
    return y;
}

Var Tape::concat_cols(Var a, Var b) {
    check_2d(a, "concat_cols");
    check_2d(b, "concat_cols");
    const std::size_t m = rows(a), p = cols(a), q = cols(b);
    if (rows(b) != m)
        throw DimError("concat_cols: row counts disagree, " +
                       shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    std::vector<real_t> out(m * (p + q));
    const auto& av = values(a);
    const auto& bv = values(b);
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(av.data() + r * p, p, out.data() + r * (p + q));
        std::copy_n(bv.data() + r * q, q, out.data() + r * (p + q) + p);
    }
    Var c = push({m, p + q}, std::move(out), requires_grad(a) || requires_grad(b));
    if (node(c).requires_grad) {
        record([a, b, c, m, p, q](Tape& tp) {
            const auto& gc = tp.ensure_grad(c.id);
            if (tp.requires_grad(a)) {
                auto& ga = tp.ensure_grad(a.id);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t i = 0; i < p; ++i)
                        ga[r * p + i] += gc[r * (p + q) + i];
            }
            if (tp.requires_grad(b)) {
                auto& gb = tp.ensure_grad(b.id);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t i = 0; i < q; ++i)
                        gb[r * q + i] += gc[r * (p + q) + p + i];
            }
        });
    }
    return c;
}

Var Tape::gather_rows(Var table, const std::vector<int>& ids) {
    check_2d(table, "gather_rows");
    const std::size_t n = rows(table), d = cols(table), batch = ids.size();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= n)
            throw IndexError("gather_rows: id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(n) + ")");
    std::vector<real_t> out(batch * d);
    const auto& tv = values(table);
    for (std::size_t r = 0; r < batch; ++r)
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d,
                    out.data() + r * d);
    Var y = push({batch, d}, std::move(out), requires_grad(table));
    if (requires_grad(table)) {
        record([table, y, ids, d, batch](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            auto& gt = tp.ensure_grad(table.id);
            for (std::size_t r = 0; r < batch; ++r) {
                real_t* dst = gt.data() + static_cast<std::size_t>(ids[r]) * d;
                const real_t* src = gy.data() + r * d;
                for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

Var Tape::scatter_rows(std::size_t out_rows, const std::vector<Var>& pieces,
                       const std::vector<std::vector<int>>& row_ids) {
    if (pieces.empty() || pieces.size() != row_ids.size())
        throw DimError("scatter_rows: pieces and row id lists must pair up");
    const std::size_t d = cols(pieces[0]);
    std::vector<std::uint8_t> seen(out_rows, 0);
    bool rg = false;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        check_2d(pieces[i], "scatter_rows");
        if (cols(pieces[i]) != d)
            throw DimError("scatter_rows: pieces have differing widths");
        if (rows(pieces[i]) != row_ids[i].size())
            throw DimError("scatter_rows: piece rows and id count disagree");
        for (int r : row_ids[i]) {
            if (r < 0 || static_cast<std::size_t>(r) >= out_rows || seen[r])
                throw IndexError("scatter_rows: bad or duplicate target row " +
                                 std::to_string(r));
            seen[r] = 1;
        }
        rg = rg || requires_grad(pieces[i]);
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw IndexError("scatter_rows: target rows not fully covered");

    std::vector<real_t> out(out_rows * d, 0);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const auto& pv = values(pieces[i]);
        for (std::size_t r = 0; r < row_ids[i].size(); ++r)
            std::copy_n(pv.data() + r * d, d,
                        out.data() + static_cast<std::size_t>(row_ids[i][r]) * d);
    }
    Var y = push({out_rows, d}, std::move(out), rg);
    if (rg) {
        record([y, pieces, row_ids, d](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            for (std::size_t i = 0; i < pieces.size(); ++i) {
                if (!tp.requires_grad(pieces[i])) continue;
                auto& gp = tp.ensure_grad(pieces[i].id);
                for (std::size_t r = 0; r < row_ids[i].size(); ++r) {
                    const real_t* src =
                        gy.data() + static_cast<std::size_t>(row_ids[i][r]) * d;
                    real_t* dst = gp.data() + r * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                }
            }
        });
    }
    return y;
}

Var Tape::relu(Var x) {
    std::vector<real_t> out(values(x));
    for (auto& v : out) v = v > real_t{0} ? v : real_t{0};
    Var y = push(shape(x), std::move(out), requires_grad(x));
    if (requires_grad(x)) {
        record([x, y](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            const auto& xv = tp.values(x);
            auto& gx = tp.ensure_grad(x.id);
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (xv[i] > real_t{0}) gx[i] += gy[i];
        });
    }
    return y;
}

Var Tape::sigmoid(Var x) {
    std::vector<real_t> out(values(x));
    for (auto& v : out) v = real_t{1} / (real_t{1} + std::exp(-v));
    Var y = push(shape(x), std::move(out), requires_grad(x));
    if (requires_grad(x)) {
        record([x, y](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            const auto& yv = tp.values(y);
            auto& gx = tp.ensure_grad(x.id);
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[i] += gy[i] * yv[i] * (real_t{1} - yv[i]);
        });
    }
    return y;
}

Var Tape::softmax_rows(Var x) {
    check_2d(x, "softmax_rows");
    const std::size_t m = rows(x), k = cols(x);
    std::vector<real_t> out(m * k);
    const auto& xv = values(x);
#ifndef NDEBUG
    for (real_t v : xv) assert(!std::isnan(v) && "softmax_rows: NaN input");
#endif
    for (std::size_t r = 0; r < m; ++r) {
        const real_t* row = xv.data() + r * k;
        real_t mx = row[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        real_t sum = 0;
        for (std::size_t i = 0; i < k; ++i) {
            const real_t e = std::exp(row[i] - mx);
            out[r * k + i] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < k; ++i) out[r * k + i] /= sum;
    }
    Var y = push({m, k}, std::move(out), requires_grad(x));
    if (requires_grad(x)) {
        record([x, y, m, k](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            const auto& yv = tp.values(y);
            auto& gx = tp.ensure_grad(x.id);
            for (std::size_t r = 0; r < m; ++r) {
                real_t dot = 0;
                for (std::size_t i = 0; i < k; ++i)
                    dot += gy[r * k + i] * yv[r * k + i];
                for (std::size_t i = 0; i < k; ++i)
                    gx[r * k + i] += yv[r * k + i] * (gy[r * k + i] - dot);
            }
        });
    }
    return y;
}

Var Tape::batchnorm(Var x, Var gamma, Var beta, BNState& state, Mode mode) {
    check_2d(x, "batchnorm");
    const std::size_t batch = rows(x), d = cols(x);
    if (size(gamma) != d || size(beta) != d || state.running_mean.size() != d)
        throw DimError("batchnorm: feature width disagrees with state");
    if (mode == Mode::train && batch < 2)
        throw BatchSizeError("batchnorm: train mode needs a batch of at least 2 rows, got " +
                             std::to_string(batch));

    const auto& xv = values(x);
    const auto& gv = values(gamma);
    const auto& bv = values(beta);
    std::vector<real_t> out(batch * d);
    std::vector<real_t> xhat(batch * d);
    std::vector<real_t> inv_std(d);

    if (mode == Mode::train) {
        for (std::size_t j = 0; j < d; ++j) {
            real_t mean = 0;
            for (std::size_t r = 0; r < batch; ++r) mean += xv[r * d + j];
            mean /= static_cast<real_t>(batch);
            real_t var = 0;
            for (std::size_t r = 0; r < batch; ++r) {
                const real_t c = xv[r * d + j] - mean;
                var += c * c;
            }
            var /= static_cast<real_t>(batch); // biased, used for normalization
            inv_std[j] = real_t{1} / std::sqrt(var + state.eps);
            for (std::size_t r = 0; r < batch; ++r) {
                const real_t h = (xv[r * d + j] - mean) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
            const real_t unbiased =
                var * static_cast<real_t>(batch) / static_cast<real_t>(batch - 1);
            state.running_mean[j] =
                (real_t{1} - state.momentum) * state.running_mean[j] + state.momentum * mean;
            state.running_var[j] =
                (real_t{1} - state.momentum) * state.running_var[j] + state.momentum * unbiased;
        }
    } else {
        for (std::size_t j = 0; j < d; ++j)
            inv_std[j] = real_t{1} / std::sqrt(state.running_var[j] + state.eps);
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                const real_t h = (xv[r * d + j] - state.running_mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
    }

    bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    Var y = push({batch, d}, std::move(out), rg);
    if (rg) {
        record([x, gamma, beta, y, batch, d, mode, xhat = std::move(xhat),
                inv_std = std::move(inv_std)](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            if (tp.requires_grad(gamma)) {
                auto& gg = tp.ensure_grad(gamma.id);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t j = 0; j < d; ++j)
                        gg[j] += gy[r * d + j] * xhat[r * d + j];
            }
            if (tp.requires_grad(beta)) {
                auto& gb = tp.ensure_grad(beta.id);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
            }
            if (tp.requires_grad(x)) {
                auto& gx = tp.ensure_grad(x.id);
                const auto& gv2 = tp.values(gamma);
                if (mode == Mode::train) {
                    // fused derivative through the batch statistics
                    for (std::size_t j = 0; j < d; ++j) {
                        real_t sum_dh = 0, sum_dh_h = 0;
                        for (std::size_t r = 0; r < batch; ++r) {
                            const real_t dh = gy[r * d + j] * gv2[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        const real_t nb = static_cast<real_t>(batch);
                        for (std::size_t r = 0; r < batch; ++r) {
                            const real_t dh = gy[r * d + j] * gv2[j];
                            gx[r * d + j] += inv_std[j] *
                                (dh - sum_dh / nb - xhat[r * d + j] * sum_dh_h / nb);
                        }
                    }
                } else {
                    for (std::size_t r = 0; r < batch; ++r)
                        for (std::size_t j = 0; j < d; ++j)
                            gx[r * d + j] += gy[r * d + j] * gv2[j] * inv_std[j];
                }
            }
        });
    }
    return y;
}

Var Tape::dropout(Var x, real_t p, Mode mode, std::mt19937_64& rng) {
    if (!(p >= real_t{0} && p < real_t{1}))
        throw ParamError("dropout: probability must lie in [0, 1), got " +
                         std::to_string(p));
    if (mode == Mode::eval || p == real_t{0}) return x;

    const real_t keep_scale = real_t{1} / (real_t{1} - p);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<real_t> scale_mask(size(x));
    for (auto& s : scale_mask)
        s = unif(rng) < static_cast<double>(p) ? real_t{0} : keep_scale;

    std::vector<real_t> out(values(x));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale_mask[i];
    Var y = push(shape(x), std::move(out), requires_grad(x));
    if (requires_grad(x)) {
        record([x, y, scale_mask = std::move(scale_mask)](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            auto& gx = tp.ensure_grad(x.id);
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[i] += gy[i] * scale_mask[i];
        });
    }
    return y;
}

Var Tape::mix(Var gate, const std::vector<Var>& experts) {
    check_2d(gate, "mix");
    const std::size_t batch = rows(gate), k = cols(gate);
    if (experts.size() != k)
        throw DimError("mix: gate width " + std::to_string(k) + " vs " +
                       std::to_string(experts.size()) + " experts");
    const std::size_t d = cols(experts[0]);
    bool rg = requires_grad(gate);
    for (Var e : experts) {
        check_2d(e, "mix");
        if (rows(e) != batch || cols(e) != d)
            throw DimError("mix: expert shape mismatch, " + shape_str(shape(e)));
        rg = rg || requires_grad(e);
    }

    std::vector<real_t> out(batch * d, 0);
    const auto& gv = values(gate);
    for (std::size_t i = 0; i < k; ++i) {
        const auto& ev = values(experts[i]);
        for (std::size_t r = 0; r < batch; ++r) {
            const real_t g = gv[r * k + i];
            for (std::size_t c = 0; c < d; ++c) out[r * d + c] += g * ev[r * d + c];
        }
    }
    Var y = push({batch, d}, std::move(out), rg);
    if (rg) {
        record([gate, experts, y, batch, k, d](Tape& tp) {
            const auto& gy = tp.ensure_grad(y.id);
            const auto& gv2 = tp.values(gate);
            for (std::size_t i = 0; i < k; ++i) {
                const auto& ev = tp.values(experts[i]);
                if (tp.requires_grad(experts[i])) {
                    auto& ge = tp.ensure_grad(experts[i].id);
                    for (std::size_t r = 0; r < batch; ++r) {
                        const real_t g = gv2[r * k + i];
                        for (std::size_t c = 0; c < d; ++c)
                            ge[r * d + c] += g * gy[r * d + c];
                    }
                }
                if (tp.requires_grad(gate)) {
                    auto& gg = tp.ensure_grad(gate.id);
                    for (std::size_t r = 0; r < batch; ++r) {
                        real_t acc = 0;
                        for (std::size_t c = 0; c < d; ++c)
                            acc += ev[r * d + c] * gy[r * d + c];
                        gg[r * k + i] += acc;
                    }
                }
            }
        });
    }
    return y;
}

Var Tape::sum(Var x) {
    const auto& xv = values(x);
    real_t acc = 0;
    for (real_t v : xv) acc += v;
    Var y = push({1}, {acc}, requires_grad(x));
    if (requires_grad(x)) {
        record([x, y](Tape& tp) {
            const real_t g = tp.ensure_grad(y.id)[0];
            auto& gx = tp.ensure_grad(x.id);
            for (auto& v : gx) v += g;
        });
    }
    return y;
}

Var Tape::bce_loss(Var probs, const std::vector<real_t>& labels) {
    check_2d(probs, "bce_loss");
    const std::size_t batch = rows(probs), n = cols(probs);
    if (labels.size() != batch * n)
        throw DimError("bce_loss: labels size " + std::to_string(labels.size()) +
                       " vs scores " + shape_str(shape(probs)));
    constexpr real_t clamp = static_cast<real_t>(1e-12);
    const auto& pv = values(probs);
    real_t acc = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const real_t y = labels[i];
        acc += y * std::log(std::max(pv[i], clamp)) +
               (real_t{1} - y) * std::log(std::max(real_t{1} - pv[i], clamp));
    }
    const real_t loss = -acc / (static_cast<real_t>(batch) * static_cast<real_t>(n));
    Var out = push({1}, {loss}, requires_grad(probs));
    if (requires_grad(probs)) {
        record([probs, out, labels, batch, n](Tape& tp) {
            const real_t g = tp.ensure_grad(out.id)[0];
            const real_t inv = g / (static_cast<real_t>(batch) * static_cast<real_t>(n));
            const auto& pv2 = tp.values(probs);
            auto& gp = tp.ensure_grad(probs.id);
            for (std::size_t i = 0; i < pv2.size(); ++i) {
                const real_t y = labels[i];
                real_t d = 0;
                if (pv2[i] > clamp) d -= y / pv2[i];
                if (real_t{1} - pv2[i] > clamp) d += (real_t{1} - y) / (real_t{1} - pv2[i]);
                gp[i] += inv * d;
            }
        });
    }
    return out;
}

} // namespace dsparse
