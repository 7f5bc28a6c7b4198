#pragma once

// Filtered-ranking evaluation: every query scores all entities, entities known
// to be true for the same (subject, relation) are removed from the candidate
// pool, and ties resolve to the mean rank.

#include <functional>
#include <string>
#include <vector>

#include "dsparse/kg.hpp"
#include "dsparse/model.hpp"

namespace dsparse {

enum class Split { train, valid, test };
Split parse_split(const std::string&);
std::string split_name(Split);

struct EvalReport {
    std::string split;
    std::size_t n_queries = 0;
    double mrr = 0, hits1 = 0, hits3 = 0, hits10 = 0;
    std::vector<std::size_t> ranks; // per query, in query order

    bool same_ranks(const EvalReport& other) const { return ranks == other.ranks; }
};

// rank = 1 + #{strictly better candidates} + floor(#{equal-score candidates}/2),
// candidates excluding every filtered entity except gold itself.
std::size_t filtered_rank(const std::vector<real_t>& scores, int gold,
                          const std::vector<int>& filter_sorted);

struct Metrics {
    double mrr = 0, hits1 = 0, hits3 = 0, hits10 = 0;
};
Metrics mrr_hits(const std::vector<std::size_t>& ranks);

// Scores one batch of (subject, relation) queries against all entities;
// returns B x |E| row-major.
using ScoreFn = std::function<std::vector<real_t>(const std::vector<int>&,
                                                  const std::vector<int>&)>;

EvalReport evaluate_with_scorer(const ScoreFn& scorer, const KnowledgeGraph& kg,
                                Split split, std::size_t batch_size = 256);

// Both query directions are covered because the splits carry inverse triples.
EvalReport evaluate(DSparsEModel& model, const KnowledgeGraph& kg, Split split);

// Mean and sample standard deviation over repeated runs.
struct Aggregate {
    Metrics mean;
    Metrics stdev; // 0 when n == 1
    std::size_t n_runs = 0;
};
Aggregate aggregate_reports(const std::vector<EvalReport>& reports);

} // namespace dsparse
