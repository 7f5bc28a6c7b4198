#pragma once

// Optimization loop: Adam with mask-preserving updates, label smoothing,
// 1-N training over unique (subject, relation) pairs, and repeated runs
// with aggregated metrics.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsparse/eval.hpp"
#include "dsparse/kg.hpp"
#include "dsparse/model.hpp"

namespace dsparse {

struct TrainConfig {
    real_t lr = static_cast<real_t>(1e-3);
    std::size_t batch = 128;
    std::size_t epochs = 100;
    real_t label_smoothing = static_cast<real_t>(0.1);
    std::uint64_t seed = 7;
    std::size_t eval_every = 0; // 0 = no periodic validation
    std::string precision = kRealName;
    void validate() const;
};

class Adam {
public:
    explicit Adam(real_t lr, real_t beta1 = static_cast<real_t>(0.9),
                  real_t beta2 = static_cast<real_t>(0.999),
                  real_t eps = static_cast<real_t>(1e-8));

    // One bias-corrected step over all params. Gradients that never flowed
    // count as zero; masked weight positions are hard-zeroed in both the
    // incoming gradient and the updated parameter.
    void step(Tape& tape, const std::vector<NamedParam>& params);

    real_t lr;
    real_t beta1, beta2, eps;
    std::int64_t t = 0;
    std::vector<std::vector<real_t>> m, v; // aligned with the param list
};

// y' = (1 - ls) y + ls / n_cols
std::vector<real_t> smooth_labels(const std::vector<real_t>& labels,
                                  std::size_t n_cols, real_t ls);

struct TrainHistory {
    std::vector<real_t> epoch_loss; // per-epoch mean batch loss
    std::vector<std::pair<std::size_t, EvalReport>> valid_reports;
};

// A completed (or loaded) training session: everything a checkpoint captures.
struct TrainRun {
    DSparsEModel model;
    Adam adam;
    std::mt19937_64 rng; // batch shuffling + dropout stream
    std::size_t epoch = 0;
    TrainConfig train_cfg;
    TrainHistory history;

    TrainRun(ModelConfig mcfg, std::size_t n_entities, std::size_t n_relations,
             TrainConfig tcfg);
};

// Seeds the model from cfg.seed, trains cfg.epochs epochs, aborts on NaN loss.
TrainRun train_run(const ModelConfig& model_cfg, const KnowledgeGraph& kg,
                   const TrainConfig& train_cfg);

// Continues an existing session (used by the runner above).
void train_epochs(TrainRun& run, const KnowledgeGraph& kg, std::size_t epochs);

struct RepeatedResult {
    std::vector<EvalReport> reports; // one per run, on `split`
    Aggregate aggregate;
};

// Runs n sessions with seeds seed+0 .. seed+n-1 and aggregates metrics on the
// given split. save_run, when set, is invoked with each finished session.
RepeatedResult repeated_runs(std::size_t n, const ModelConfig& model_cfg,
                             const KnowledgeGraph& kg, const TrainConfig& train_cfg,
                             Split split,
                             const std::function<void(std::size_t, TrainRun&)>& save_run = {});

} // namespace dsparse
