#pragma once

// The DSparsE architecture: a shallow-but-wide encoder (gated expert mixture
// plus a relation-aware layer, fused by a projection) feeding a deep-but-thin
// residual decoder, with every affine map except the gate carrying a fixed
// random sparsity mask. Scores against all entities come from a dot product
// with the entity table followed by a sigmoid.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsparse/array.hpp"

namespace dsparse {

enum class Act { relu, sigmoid };

// Where dropout sits inside a residual block: on the batchnorm output before
// the skip addition, or after the closing activation.
enum class ResDropoutPos { pre_add, post_act };

struct ModelConfig {
    std::size_t d = 200;    // embedding width
    std::size_t d_h = 0;    // encoder hidden width, 0 = same as d
    std::size_t k = 3;      // experts
    real_t t = 1;           // gate temperature
    real_t alpha = 0.5;     // sparsity degree
    std::size_t depth = 3;  // residual blocks
    real_t dropout = 0.2;
    Act act = Act::relu;
    ResDropoutPos res_dropout_pos = ResDropoutPos::pre_add;
    std::uint64_t seed = 7;

    // ablation switches
    bool use_dynamic = true;
    bool use_relation = true;
    bool residual_skip = true;
    std::size_t pure_mlp_width = 0;     // > 0: one wide layer replaces the expert mixture
    std::size_t wide_decoder_width = 0; // > 0: one wide shallow block replaces the stack

    std::size_t hidden() const { return d_h ? d_h : d; }
    void validate() const; // ParamError on out-of-range fields
};

Act parse_act(const std::string&);
std::string act_name(Act);
ResDropoutPos parse_res_dropout_pos(const std::string&);
std::string res_dropout_pos_name(ResDropoutPos);

// Affine map with a fixed binary mask; mask entries never change after
// initialization and masked weights stay exactly zero.
struct SparseLinear {
    Var weight;                     // [out x in]
    Var bias;                       // invalid handle = no bias
    std::vector<std::uint8_t> mask; // empty = dense
    std::size_t in = 0, out = 0;
    real_t alpha = 0;

    Var forward(Tape& tape, Var x) const {
        return tape.linear(x, weight, bias, mask.empty() ? nullptr : &mask);
    }
    std::size_t param_count() const { return in * out + (bias.valid() ? out : 0); }
};

// Mask sampled i.i.d. Bernoulli(1 - alpha); weights Glorot-uniform over the
// full fan-in/fan-out, zeroed where masked; bias zero.
SparseLinear init_sparse_linear(Tape& tape, std::size_t out, std::size_t in,
                                real_t alpha, std::uint64_t seed, bool bias = true);
// Unmasked variant (the gate layer stays dense).
SparseLinear init_dense_linear(Tape& tape, std::size_t out, std::size_t in,
                               std::uint64_t seed, bool bias = true);

struct ResidualBlock {
    SparseLinear lin; // d -> d
    Var gamma, beta;
    BNState bn;
};

// Decoder control for depth ablations: linear/BN/activation widened to H,
// then a linear back down to d.
struct WideDecoder {
    SparseLinear lin1; // d -> H
    SparseLinear lin2; // H -> d
    Var gamma, beta;
    BNState bn;
};

struct NamedParam {
    std::string name;
    Var var;
    const std::vector<std::uint8_t>* mask = nullptr;
};

class DSparsEModel {
public:
    DSparsEModel(ModelConfig cfg, std::size_t n_entities, std::size_t n_relations);
    DSparsEModel(const DSparsEModel&) = delete;
    DSparsEModel& operator=(const DSparsEModel&) = delete;
    DSparsEModel(DSparsEModel&&) = default;
    DSparsEModel& operator=(DSparsEModel&&) = default;

    // g = softmax(gate([e_s; e_r] / t)); temperature divides the gate input,
    // so the bias is deliberately not tempered.
    Var gate_forward(Var pair);
    // weighted fusion over all experts, no top-k truncation
    Var dynamic_forward(Var pair);
    Var relation_aware_forward(Var pair, const std::vector<int>& relation_ids);
    Var encode(Var pair, const std::vector<int>& relation_ids, Mode mode,
               std::mt19937_64& rng);
    Var residual_forward(Var x, std::size_t block, Mode mode, std::mt19937_64& rng);
    Var decode(Var x, Mode mode, std::mt19937_64& rng);
    Var score_all(Var decoded); // sigmoid(decoded . E^T), [B x |E|]
    Var forward(const std::vector<int>& subjects, const std::vector<int>& relations,
                Mode mode, std::mt19937_64& rng);

    // Eval-mode convenience: runs forward, copies the scores out, resets the tape.
    std::vector<real_t> score_batch_eval(const std::vector<int>& subjects,
                                         const std::vector<int>& relations);
    // Eval-mode gate values [B x k] for gate-vector export.
    std::vector<real_t> gate_batch_eval(const std::vector<int>& subjects,
                                        const std::vector<int>& relations);

    std::vector<NamedParam> named_params();
    std::size_t parameter_count();

    Tape& tape() { return tape_; }
    const ModelConfig& config() const { return cfg_; }
    std::size_t n_entities() const { return n_entities_; }
    std::size_t n_relations() const { return n_relations_; }

    Var entity_embeddings() const { return ent_emb_; }
    Var relation_embeddings() const { return rel_emb_; }

    // layer access for checkpointing and tests
    SparseLinear& gate() { return gate_; }
    std::vector<SparseLinear>& experts() { return experts_; }
    SparseLinear* pure_mlp() { return pure_mlp_width_ ? &pure_mlp_ : nullptr; }
    std::vector<SparseLinear>& relation_layers() { return rel_layers_; }
    SparseLinear& projection() { return proj_; }
    std::vector<ResidualBlock>& residual_blocks() { return blocks_; }
    WideDecoder* wide_decoder() { return cfg_.wide_decoder_width ? &wide_ : nullptr; }

private:
    ModelConfig cfg_;
    std::size_t n_entities_ = 0, n_relations_ = 0;
    std::size_t pure_mlp_width_ = 0;
    Tape tape_;
    Var ent_emb_, rel_emb_;
    SparseLinear gate_;
    std::vector<SparseLinear> experts_;
    SparseLinear pure_mlp_;
    std::vector<SparseLinear> rel_layers_;
    SparseLinear proj_;
    std::vector<ResidualBlock> blocks_;
    WideDecoder wide_;
    std::mt19937_64 eval_rng_{0}; // never drawn from: eval dropout is identity

    Var activate(Var x);
};

// Closed-form trainable-parameter total for a config; masks and running
// statistics are not trainable and do not count.
std::size_t expected_parameter_count(const ModelConfig& cfg, std::size_t n_entities,
                                     std::size_t n_relations);

// Width of the single layer that matches the dynamic layer's parameter count
// (gate included): H = k (d_h + 1) exactly.
std::size_t pure_mlp_width_for(const ModelConfig& cfg);
// Width of the wide shallow decoder matching a depth-D residual stack.
std::size_t wide_decoder_width_for(std::size_t depth, std::size_t d);

} // namespace dsparse
