#include "dsparse/model.hpp"

#include <cmath>
#include <map>

namespace dsparse {

void ModelConfig::validate() const {
    if (d == 0) throw ParamError("d must be positive");
    if (k == 0) throw ParamError("k must be positive");
    if (!(t > real_t{0})) throw ParamError("temperature must be positive, got " + std::to_string(t));
    if (!(alpha >= real_t{0} && alpha < real_t{1}))
        throw ParamError("sparsity degree must lie in [0, 1), got " + std::to_string(alpha));
    if (!(dropout >= real_t{0} && dropout < real_t{1}))
        throw ParamError("dropout must lie in [0, 1), got " + std::to_string(dropout));
    if (depth == 0 && wide_decoder_width == 0)
        throw ParamError("decoder depth must be positive");
}

Act parse_act(const std::string& s) {
    if (s == "relu") return Act::relu;
    if (s == "sigmoid") return Act::sigmoid;
    throw ParamError("unknown activation: " + s);
}

std::string act_name(Act a) { return a == Act::relu ? "relu" : "sigmoid"; }

ResDropoutPos parse_res_dropout_pos(const std::string& s) {
    if (s == "pre_add") return ResDropoutPos::pre_add;
    if (s == "post_act") return ResDropoutPos::post_act;
    throw ParamError("unknown residual dropout position: " + s);
}

std::string res_dropout_pos_name(ResDropoutPos p) {
    return p == ResDropoutPos::pre_add ? "pre_add" : "post_act";
}

static SparseLinear init_linear_impl(Tape& tape, std::size_t out, std::size_t in,
                                     real_t alpha, std::uint64_t seed, bool bias,
                                     bool masked) {
    if (!(alpha >= real_t{0} && alpha < real_t{1}))
        throw ParamError("sparsity degree must lie in [0, 1), got " + std::to_string(alpha));
    SparseLinear lin;
    lin.in = in;
    lin.out = out;
    lin.alpha = alpha;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (masked) {
        lin.mask.resize(out * in);
        for (auto& m : lin.mask)
            m = unif(rng) < static_cast<double>(alpha) ? 0 : 1;
    }
    // Glorot over the full fan-in/fan-out, not the surviving one
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<real_t> w(out * in);
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<real_t>((unif(rng) * 2.0 - 1.0) * limit);
        if (masked && !lin.mask[i]) w[i] = 0;
    }
    lin.weight = tape.leaf({out, in}, std::move(w));
    if (bias) lin.bias = tape.leaf({out}, std::vector<real_t>(out, 0));
    return lin;
}

SparseLinear init_sparse_linear(Tape& tape, std::size_t out, std::size_t in,
                                real_t alpha, std::uint64_t seed, bool bias) {
    return init_linear_impl(tape, out, in, alpha, seed, bias, true);
}

SparseLinear init_dense_linear(Tape& tape, std::size_t out, std::size_t in,
                               std::uint64_t seed, bool bias) {
    return init_linear_impl(tape, out, in, real_t{0}, seed, bias, false);
}

DSparsEModel::DSparsEModel(ModelConfig cfg, std::size_t n_entities, std::size_t n_relations)
    : cfg_(cfg), n_entities_(n_entities), n_relations_(n_relations),
      pure_mlp_width_(cfg.pure_mlp_width) {
    cfg_.validate();
    if (n_entities_ == 0 || n_relations_ == 0)
        throw ParamError("model needs nonempty entity and relation vocabularies");

    const std::size_t d = cfg_.d;
    const std::size_t dh = cfg_.hidden();
    std::mt19937_64 master(cfg_.seed);
    auto next_seed = [&master]() { return master(); };

    std::normal_distribution<double> emb_init(0.0, 0.1);
    std::vector<real_t> ev(n_entities_ * d), rv(n_relations_ * d);
    for (auto& v : ev) v = static_cast<real_t>(emb_init(master));
    for (auto& v : rv) v = static_cast<real_t>(emb_init(master));
    ent_emb_ = tape_.leaf({n_entities_, d}, std::move(ev));
    rel_emb_ = tape_.leaf({n_relations_, d}, std::move(rv));

    if (cfg_.use_dynamic) {
        if (pure_mlp_width_) {
            pure_mlp_ = init_sparse_linear(tape_, pure_mlp_width_, 2 * d, cfg_.alpha, next_seed());
        } else {
            gate_ = init_dense_linear(tape_, cfg_.k, 2 * d, next_seed());
            experts_.reserve(cfg_.k);
            for (std::size_t i = 0; i < cfg_.k; ++i)
                experts_.push_back(init_sparse_linear(tape_, dh, 2 * d, cfg_.alpha, next_seed()));
        }
    }
    if (cfg_.use_relation) {
        rel_layers_.reserve(n_relations_);
        for (std::size_t r = 0; r < n_relations_; ++r)
            rel_layers_.push_back(init_sparse_linear(tape_, dh, 2 * d, cfg_.alpha, next_seed()));
    }

    std::size_t proj_in = 0;
    if (cfg_.use_dynamic) proj_in += pure_mlp_width_ ? pure_mlp_width_ : dh;
    if (cfg_.use_relation) proj_in += dh;
    if (proj_in == 0) proj_in = 2 * d; // encoder stripped: project the raw pair
    proj_ = init_sparse_linear(tape_, d, proj_in, cfg_.alpha, next_seed());

    if (cfg_.wide_decoder_width) {
        const std::size_t h = cfg_.wide_decoder_width;
        wide_.lin1 = init_sparse_linear(tape_, h, d, cfg_.alpha, next_seed());
        wide_.lin2 = init_sparse_linear(tape_, d, h, cfg_.alpha, next_seed());
        wide_.gamma = tape_.leaf({h}, std::vector<real_t>(h, 1));
        wide_.beta = tape_.leaf({h}, std::vector<real_t>(h, 0));
        wide_.bn = BNState(h);
    } else {
        blocks_.reserve(cfg_.depth);
        for (std::size_t i = 0; i < cfg_.depth; ++i) {
            ResidualBlock b;
            b.lin = init_sparse_linear(tape_, d, d, cfg_.alpha, next_seed());
            b.gamma = tape_.leaf({d}, std::vector<real_t>(d, 1));
            b.beta = tape_.leaf({d}, std::vector<real_t>(d, 0));
            b.bn = BNState(d);
            blocks_.push_back(std::move(b));
        }
    }
    tape_.freeze();
}

Var DSparsEModel::activate(Var x) {
    return cfg_.act == Act::relu ? tape_.relu(x) : tape_.sigmoid(x);
}

Var DSparsEModel::gate_forward(Var pair) {
    if (!(cfg_.t > real_t{0}))
        throw ParamError("temperature must be positive");
    Var scaled = tape_.scale(pair, real_t{1} / cfg_.t);
    return tape_.softmax_rows(gate_.forward(tape_, scaled));
}

Var DSparsEModel::dynamic_forward(Var pair) {
    if (pure_mlp_width_) return activate(pure_mlp_.forward(tape_, pair));
    Var g = gate_forward(pair);
    std::vector<Var> outs;
    outs.reserve(experts_.size());
    for (const auto& ex : experts_) outs.push_back(activate(ex.forward(tape_, pair)));
    return tape_.mix(g, outs);
}

Var DSparsEModel::relation_aware_forward(Var pair, const std::vector<int>& relation_ids) {
    if (relation_ids.size() != tape_.rows(pair))
        throw DimError("relation_aware_forward: one relation id per row required");
    for (int r : relation_ids)
        if (r < 0 || static_cast<std::size_t>(r) >= n_relations_)
            throw IndexError("relation id " + std::to_string(r) + " out of range [0, " +
                             std::to_string(n_relations_) + ")");
    // group rows by relation so each group runs through its own weights
    std::map<int, std::vector<int>> groups;
    for (std::size_t i = 0; i < relation_ids.size(); ++i)
        groups[relation_ids[i]].push_back(static_cast<int>(i));

    std::vector<Var> pieces;
    std::vector<std::vector<int>> positions;
    for (const auto& [r, rows] : groups) {
        Var sub = tape_.gather_rows(pair, rows);
        pieces.push_back(rel_layers_[static_cast<std::size_t>(r)].forward(tape_, sub));
        positions.push_back(rows);
    }
    Var merged = pieces.size() == 1
                     ? pieces[0]
                     : tape_.scatter_rows(relation_ids.size(), pieces, positions);
    return activate(merged);
}

Var DSparsEModel::encode(Var pair, const std::vector<int>& relation_ids, Mode mode,
                         std::mt19937_64& rng) {
    Var h;
    if (cfg_.use_dynamic && cfg_.use_relation) {
        Var d_out = dynamic_forward(pair);
        Var r_out = relation_aware_forward(pair, relation_ids);
        h = tape_.concat_cols(d_out, r_out);
    } else if (cfg_.use_dynamic) {
        h = dynamic_forward(pair);
    } else if (cfg_.use_relation) {
        h = relation_aware_forward(pair, relation_ids);
    } else {
        h = pair;
    }
    Var p = activate(proj_.forward(tape_, h));
    return tape_.dropout(p, cfg_.dropout, mode, rng);
}

Var DSparsEModel::residual_forward(Var x, std::size_t block, Mode mode,
                                   std::mt19937_64& rng) {
    ResidualBlock& b = blocks_.at(block);
    Var y = b.lin.forward(tape_, x);
    y = tape_.batchnorm(y, b.gamma, b.beta, b.bn, mode);
    if (cfg_.res_dropout_pos == ResDropoutPos::pre_add)
        y = tape_.dropout(y, cfg_.dropout, mode, rng);
    Var z = cfg_.residual_skip ? tape_.add(y, x) : y;
    z = activate(z);
    if (cfg_.res_dropout_pos == ResDropoutPos::post_act)
        z = tape_.dropout(z, cfg_.dropout, mode, rng);
    return z;
}

Var DSparsEModel::decode(Var x, Mode mode, std::mt19937_64& rng) {
    if (cfg_.wide_decoder_width) {
        Var y = wide_.lin1.forward(tape_, x);
        y = tape_.batchnorm(y, wide_.gamma, wide_.beta, wide_.bn, mode);
        y = activate(y);
        y = tape_.dropout(y, cfg_.dropout, mode, rng);
        return activate(wide_.lin2.forward(tape_, y));
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        x = residual_forward(x, i, mode, rng);
    return x;
}

Var DSparsEModel::score_all(Var decoded) {
    return tape_.sigmoid(tape_.matmul_nt(decoded, ent_emb_));
}

Var DSparsEModel::forward(const std::vector<int>& subjects,
                          const std::vector<int>& relations, Mode mode,
                          std::mt19937_64& rng) {
    if (subjects.size() != relations.size())
        throw DimError("forward: subject and relation id counts disagree");
    for (int s : subjects)
        if (s < 0 || static_cast<std::size_t>(s) >= n_entities_)
            throw IndexError("entity id " + std::to_string(s) + " out of range [0, " +
                             std::to_string(n_entities_) + ")");
    Var e_s = tape_.gather_rows(ent_emb_, subjects);
    Var e_r = tape_.gather_rows(rel_emb_, relations);
    Var pair = tape_.concat_cols(e_s, e_r);
    Var enc = encode(pair, relations, mode, rng);
    Var dec = decode(enc, mode, rng);
    return score_all(dec);
}

std::vector<real_t> DSparsEModel::score_batch_eval(const std::vector<int>& subjects,
                                                   const std::vector<int>& relations) {
    Var scores = forward(subjects, relations, Mode::eval, eval_rng_);
    std::vector<real_t> out = tape_.values(scores);
    tape_.reset();
    return out;
}

std::vector<real_t> DSparsEModel::gate_batch_eval(const std::vector<int>& subjects,
                                                  const std::vector<int>& relations) {
    if (pure_mlp_width_ || !cfg_.use_dynamic)
        throw StateError("model has no gate layer");
    Var e_s = tape_.gather_rows(ent_emb_, subjects);
    Var e_r = tape_.gather_rows(rel_emb_, relations);
    Var g = gate_forward(tape_.concat_cols(e_s, e_r));
    std::vector<real_t> out = tape_.values(g);
    tape_.reset();
    return out;
}

std::vector<NamedParam> DSparsEModel::named_params() {
    std::vector<NamedParam> out;
    auto add_linear = [&out](const std::string& prefix, const SparseLinear& lin) {
        out.push_back({prefix + ".weight", lin.weight,
                       lin.mask.empty() ? nullptr : &lin.mask});
        if (lin.bias.valid()) out.push_back({prefix + ".bias", lin.bias, nullptr});
    };
    out.push_back({"ent_emb", ent_emb_, nullptr});
    out.push_back({"rel_emb", rel_emb_, nullptr});
    if (cfg_.use_dynamic) {
        if (pure_mlp_width_) {
            add_linear("pure_mlp", pure_mlp_);
        } else {
            add_linear("gate", gate_);
            for (std::size_t i = 0; i < experts_.size(); ++i)
                add_linear("expert" + std::to_string(i), experts_[i]);
        }
    }
    for (std::size_t r = 0; r < rel_layers_.size(); ++r)
        add_linear("relaware" + std::to_string(r), rel_layers_[r]);
    add_linear("proj", proj_);
    if (cfg_.wide_decoder_width) {
        add_linear("wide.lin1", wide_.lin1);
        add_linear("wide.lin2", wide_.lin2);
        out.push_back({"wide.gamma", wide_.gamma, nullptr});
        out.push_back({"wide.beta", wide_.beta, nullptr});
    } else {
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "res" + std::to_string(i);
            add_linear(p, blocks_[i].lin);
            out.push_back({p + ".gamma", blocks_[i].gamma, nullptr});
            out.push_back({p + ".beta", blocks_[i].beta, nullptr});
        }
    }
    return out;
}

std::size_t DSparsEModel::parameter_count() {
    std::size_t total = 0;
    for (const NamedParam& p : named_params()) total += tape_.size(p.var);
    return total;
}

std::size_t expected_parameter_count(const ModelConfig& cfg, std::size_t n_entities,
                                     std::size_t n_relations) {
    const std::size_t d = cfg.d, dh = cfg.hidden();
    std::size_t total = n_entities * d + n_relations * d;
    std::size_t proj_in = 0;
    if (cfg.use_dynamic) {
        if (cfg.pure_mlp_width) {
            total += cfg.pure_mlp_width * (2 * d + 1);
            proj_in += cfg.pure_mlp_width;
        } else {
            total += cfg.k * (2 * d + 1) * (dh + 1); // gate plus k experts
            proj_in += dh;
        }
    }
    if (cfg.use_relation) {
        total += n_relations * dh * (2 * d + 1);
        proj_in += dh;
    }
    if (proj_in == 0) proj_in = 2 * d;
    total += d * proj_in + d;
    if (cfg.wide_decoder_width) {
        const std::size_t h = cfg.wide_decoder_width;
        total += h * d + h + 2 * h + d * h + d; // lin1, bn, lin2
    } else {
        total += cfg.depth * (d * d + d + 2 * d);
    }
    return total;
}

std::size_t pure_mlp_width_for(const ModelConfig& cfg) {
    return cfg.k * (cfg.hidden() + 1);
}

std::size_t wide_decoder_width_for(std::size_t depth, std::size_t d) {
    // H (2d + 3) + d == depth (d^2 + 3d), rounded to the nearest width
    const double target = static_cast<double>(depth) * (static_cast<double>(d) * d + 3.0 * d);
    const double h = (target - static_cast<double>(d)) / (2.0 * static_cast<double>(d) + 3.0);
    return h < 1.0 ? 1 : static_cast<std::size_t>(h + 0.5);
}

} // namespace dsparse
