#include "dsparse/eval.hpp"

#include <algorithm>
#include <cmath>

namespace dsparse {

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "valid") return Split::valid;
    if (s == "test") return Split::test;
    throw ParamError("unknown split: " + s);
}

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        default: return "test";
    }
}

std::size_t filtered_rank(const std::vector<real_t>& scores, int gold,
                          const std::vector<int>& filter_sorted) {
    if (!std::binary_search(filter_sorted.begin(), filter_sorted.end(), gold))
        throw ProtocolError("gold entity " + std::to_string(gold) +
                            " is missing from its own filter set");
    const real_t gold_score = scores[static_cast<std::size_t>(gold)];
    std::size_t greater = 0, equal = 0;
    for (std::size_t e = 0; e < scores.size(); ++e) {
        const int ei = static_cast<int>(e);
        if (ei == gold) continue;
        if (std::binary_search(filter_sorted.begin(), filter_sorted.end(), ei)) continue;
        if (scores[e] > gold_score)
            ++greater;
        else if (scores[e] == gold_score)
            ++equal;
    }
    return 1 + greater + equal / 2;
}

Metrics mrr_hits(const std::vector<std::size_t>& ranks) {
    Metrics m;
    if (ranks.empty()) return m;
    for (std::size_t r : ranks) {
        m.mrr += 1.0 / static_cast<double>(r);
        m.hits1 += r <= 1 ? 1.0 : 0.0;
        m.hits3 += r <= 3 ? 1.0 : 0.0;
        m.hits10 += r <= 10 ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(ranks.size());
    m.mrr /= n;
    m.hits1 /= n;
    m.hits3 /= n;
    m.hits10 /= n;
    return m;
}

static const std::vector<Triple>& split_triples(const KnowledgeGraph& kg, Split split) {
    switch (split) {
        case Split::train: return kg.train;
        case Split::valid: return kg.valid;
        default: return kg.test;
    }
}

EvalReport evaluate_with_scorer(const ScoreFn& scorer, const KnowledgeGraph& kg,
                                Split split, std::size_t batch_size) {
    const std::vector<Triple>& queries = split_triples(kg, split);
    EvalReport report;
    report.split = split_name(split);
    report.n_queries = queries.size();
    report.ranks.reserve(queries.size());

    const std::size_t n_ent = kg.n_entities();
    for (std::size_t begin = 0; begin < queries.size(); begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, queries.size());
        std::vector<int> subjects, relations;
        subjects.reserve(end - begin);
        relations.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            subjects.push_back(queries[i].s);
            relations.push_back(queries[i].r);
        }
        const std::vector<real_t> scores = scorer(subjects, relations);
        if (scores.size() != (end - begin) * n_ent)
            throw DimError("scorer returned wrong score count");
        for (std::size_t i = begin; i < end; ++i) {
            std::vector<real_t> row(scores.begin() + static_cast<std::ptrdiff_t>((i - begin) * n_ent),
                                    scores.begin() + static_cast<std::ptrdiff_t>((i - begin + 1) * n_ent));
            report.ranks.push_back(
                filtered_rank(row, queries[i].o, kg.filter_set(queries[i].s, queries[i].r)));
        }
    }
    const Metrics m = mrr_hits(report.ranks);
    report.mrr = m.mrr;
    report.hits1 = m.hits1;
    report.hits3 = m.hits3;
    report.hits10 = m.hits10;
    return report;
}

EvalReport evaluate(DSparsEModel& model, const KnowledgeGraph& kg, Split split) {
    if (model.n_entities() != kg.n_entities() || model.n_relations() != kg.n_relations())
        throw IntegrityError("model and dataset vocabulary sizes disagree");
    return evaluate_with_scorer(
        [&model](const std::vector<int>& s, const std::vector<int>& r) {
            return model.score_batch_eval(s, r);
        },
        kg, split);
}

Aggregate aggregate_reports(const std::vector<EvalReport>& reports) {
    Aggregate agg;
    agg.n_runs = reports.size();
    if (reports.empty()) return agg;
    auto accumulate = [&reports](auto getter) {
        double mean = 0;
        for (const auto& r : reports) mean += getter(r);
        mean /= static_cast<double>(reports.size());
        double var = 0;
        if (reports.size() > 1) {
            for (const auto& r : reports) {
                const double d = getter(r) - mean;
                var += d * d;
            }
            var /= static_cast<double>(reports.size() - 1); // sample std
        }
        return std::pair<double, double>(mean, std::sqrt(var));
    };
    std::tie(agg.mean.mrr, agg.stdev.mrr) = accumulate([](const EvalReport& r) { return r.mrr; });
    std::tie(agg.mean.hits1, agg.stdev.hits1) = accumulate([](const EvalReport& r) { return r.hits1; });
    std::tie(agg.mean.hits3, agg.stdev.hits3) = accumulate([](const EvalReport& r) { return r.hits3; });
    std::tie(agg.mean.hits10, agg.stdev.hits10) = accumulate([](const EvalReport& r) { return r.hits10; });
    return agg;
}

} // namespace dsparse
