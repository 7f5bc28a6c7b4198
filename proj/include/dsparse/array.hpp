#pragma once

// Dense-array computation tape with reverse-mode gradients.
//
// All layer math in this project runs through a single Tape: forward calls
// append value nodes plus a backward rule, backward() replays the rules in
// reverse and accumulates into the grad buffers of every requires_grad node.
// Model parameters are long-lived leaves created before freeze(); everything
// built afterwards is transient and dropped by reset(), so one tape serves an
// arbitrary number of training steps without reallocating the parameters.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dsparse/errors.hpp"

namespace dsparse {

#ifdef DSPARSE_REAL32
using real_t = float;
inline constexpr const char* kRealName = "f32";
#else
using real_t = double;
inline constexpr const char* kRealName = "f64";
#endif

enum class Mode { train, eval };

// Handle into a Tape. id < 0 means "no array" (used for optional biases).
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Running statistics of one batchnorm layer. The learned scale/shift live on
// the tape as ordinary leaves; only the non-trained state is kept here.
struct BNState {
    std::vector<real_t> running_mean;
    std::vector<real_t> running_var;
    real_t momentum = static_cast<real_t>(0.1);
    real_t eps = static_cast<real_t>(1e-5);

    explicit BNState(std::size_t features = 0)
        : running_mean(features, 0), running_var(features, 1) {}
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    // -- node management -----------------------------------------------------

    Var leaf(std::vector<std::size_t> shape, std::vector<real_t> values,
             bool requires_grad = true);
    Var constant(std::vector<std::size_t> shape, std::vector<real_t> values);

    // Marks every node created so far as persistent; reset() keeps them.
    void freeze();
    // Drops all transient nodes and every recorded backward rule.
    void reset();
    // Clears the grad buffers of all remaining nodes.
    void zero_grad();

    const std::vector<std::size_t>& shape(Var v) const { return node(v).shape; }
    std::size_t size(Var v) const { return node(v).values.size(); }
    std::size_t rows(Var v) const;
    std::size_t cols(Var v) const;
    std::vector<real_t>& values(Var v) { return node(v).values; }
    const std::vector<real_t>& values(Var v) const { return node(v).values; }
    // Empty until gradient has flowed into v.
    const std::vector<real_t>& grad(Var v) const { return node(v).grad; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // -- operations ----------------------------------------------------------

    // [m x n] * [n x p] -> [m x p]
    Var matmul(Var a, Var b);
    // a * b^T: [m x n] * [p x n] -> [m x p]
    Var matmul_nt(Var a, Var b);
    // Fused affine map y = x * (W (.) mask)^T + b with W stored [out x in].
    // mask may be null (dense); b may be invalid (no bias). The mask is not
    // copied and must outlive every backward() that touches this op.
    Var linear(Var x, Var w, Var b, const std::vector<std::uint8_t>* mask);
    Var add(Var a, Var b);
    Var mul(Var a, Var b); // elementwise
    Var scale(Var x, real_t c);
    Var concat_cols(Var a, Var b);
    // out[i] = table[ids[i]] (row gather); backward scatter-adds.
    Var gather_rows(Var table, const std::vector<int>& ids);
    // Inverse of a row partition: piece i supplies rows row_ids[i] of the
    // result. Every output row must be covered exactly once.
    Var scatter_rows(std::size_t out_rows, const std::vector<Var>& pieces,
                     const std::vector<std::vector<int>>& row_ids);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var softmax_rows(Var x);
    Var batchnorm(Var x, Var gamma, Var beta, BNState& state, Mode mode);
    // Inverted dropout: train mode zeroes with probability p and scales
    // survivors by 1/(1-p); eval mode is the identity.
    Var dropout(Var x, real_t p, Mode mode, std::mt19937_64& rng);
    // out = sum_i gate[:,i] (.) experts[i], gate [B x k], experts k of [B x d].
    Var mix(Var gate, const std::vector<Var>& experts);
    Var sum(Var x); // -> scalar [1]
    // Mean over rows of -(1/N) sum_i y log p + (1-y) log(1-p), log arguments
    // clamped at 1e-12. probs and labels must both be [B x N].
    Var bce_loss(Var probs, const std::vector<real_t>& labels);

    // Seeds grad(loss)=1 and replays all recorded rules in reverse order.
    // Accumulates on repeated calls; zero_grad() restores a clean slate.
    void backward(Var loss);

private:
    struct Node {
        std::vector<std::size_t> shape;
        std::vector<real_t> values;
        std::vector<real_t> grad; // lazily sized
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<std::function<void(Tape&)>> rules_;
    std::size_t frozen_ = 0;

    Node& node(Var v);
    const Node& node(Var v) const;
    Var push(std::vector<std::size_t> shape, std::vector<real_t> values,
             bool requires_grad);
    std::vector<real_t>& ensure_grad(int id);
    void record(std::function<void(Tape&)> rule) { rules_.push_back(std::move(rule)); }
    void check_2d(Var v, const char* op) const;
};

std::string shape_str(const std::vector<std::size_t>& s);

} // namespace dsparse
