#include "dsparse/kg.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace dsparse {

int Vocab::add_entity(const std::string& name) {
    auto it = entity_ids.find(name);
    if (it != entity_ids.end()) return it->second;
    const int id = static_cast<int>(entity_names.size());
    entity_names.push_back(name);
    entity_ids.emplace(name, id);
    return id;
}

int Vocab::add_relation(const std::string& name) {
    auto it = relation_ids.find(name);
    if (it != relation_ids.end()) return it->second;
    const int id = static_cast<int>(relation_names.size());
    relation_names.push_back(name);
    relation_ids.emplace(name, id);
    return id;
}

int Vocab::entity(const std::string& name) const {
    auto it = entity_ids.find(name);
    if (it == entity_ids.end()) throw VocabError("unknown entity: " + name);
    return it->second;
}

int Vocab::relation(const std::string& name) const {
    auto it = relation_ids.find(name);
    if (it == relation_ids.end()) throw VocabError("unknown relation: " + name);
    return it->second;
}

std::vector<Triple> load_triples(const std::string& path, Vocab& vocab, bool strict) {
    std::ifstream in(path);
    if (!in) throw ParamError("cannot open triple file: " + path);
    std::vector<Triple> triples;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab1 = line.find('\t');
        const auto tab2 = tab1 == std::string::npos ? std::string::npos
                                                    : line.find('\t', tab1 + 1);
        if (tab1 == std::string::npos || tab2 == std::string::npos ||
            line.find('\t', tab2 + 1) != std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) +
                             ": expected exactly 3 tab-separated fields");
        const std::string s = line.substr(0, tab1);
        const std::string r = line.substr(tab1 + 1, tab2 - tab1 - 1);
        const std::string o = line.substr(tab2 + 1);
        if (s.empty() || r.empty() || o.empty())
            throw ParseError(path + ":" + std::to_string(lineno) + ": empty field");
        Triple t;
        if (strict) {
            try {
                t.s = vocab.entity(s);
                t.r = vocab.relation(r);
                t.o = vocab.entity(o);
            } catch (const VocabError& e) {
                throw VocabError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        } else {
            t.s = vocab.add_entity(s);
            t.r = vocab.add_relation(r);
            t.o = vocab.add_entity(o);
        }
        triples.push_back(t);
    }
    return triples;
}

void save_triples(const std::string& path, const std::vector<Triple>& triples,
                  const Vocab& vocab) {
    std::ofstream out(path);
    if (!out) throw ParamError("cannot write triple file: " + path);
    for (const Triple& t : triples)
        out << vocab.entity_names[static_cast<std::size_t>(t.s)] << '\t'
            << vocab.relation_names[static_cast<std::size_t>(t.r)] << '\t'
            << vocab.entity_names[static_cast<std::size_t>(t.o)] << '\n';
}

std::pair<std::vector<Triple>, Vocab>
add_inverse_relations(const std::vector<Triple>& triples, const Vocab& vocab) {
    if (vocab.augmented)
        throw StateError("inverse relations already added");
    Vocab out = vocab;
    const int n_raw = static_cast<int>(vocab.n_relations());
    for (int r = 0; r < n_raw; ++r)
        out.add_relation(vocab.relation_names[static_cast<std::size_t>(r)] + "_inv");
    out.augmented = true;

    std::vector<Triple> aug;
    aug.reserve(triples.size() * 2);
    for (const Triple& t : triples) aug.push_back(t);
    for (const Triple& t : triples) aug.push_back({t.o, t.r + n_raw, t.s});
    return {std::move(aug), std::move(out)};
}

std::unordered_map<std::int64_t, std::vector<int>>
build_truth_index(const std::vector<const std::vector<Triple>*>& splits,
                  std::size_t n_relations, std::size_t /*n_entities*/) {
    std::unordered_map<std::int64_t, std::vector<int>> truth;
    for (const auto* split : splits)
        for (const Triple& t : *split) {
            const std::int64_t key =
                static_cast<std::int64_t>(t.s) * static_cast<std::int64_t>(n_relations) + t.r;
            truth[key].push_back(t.o);
        }
    for (auto& [key, objs] : truth) {
        std::sort(objs.begin(), objs.end());
        objs.erase(std::unique(objs.begin(), objs.end()), objs.end());
    }
    return truth;
}

const std::vector<int>& KnowledgeGraph::filter_set(int s, int r) const {
    auto it = truth.find(key(s, r));
    if (it == truth.end())
        throw ProtocolError("no known objects for pair (" + std::to_string(s) + ", " +
                            std::to_string(r) + ")");
    return it->second;
}

KnowledgeGraph build_kg(const RawDataset& raw) {
    KnowledgeGraph kg;
    kg.n_raw_relations = raw.vocab.n_relations();

    auto [train_aug, vocab_aug] = add_inverse_relations(raw.train, raw.vocab);
    kg.train = std::move(train_aug);
    kg.vocab = std::move(vocab_aug);
    // valid/test reuse the already augmented vocab, so expand by hand
    const int n_raw = static_cast<int>(kg.n_raw_relations);
    auto expand = [&](const std::vector<Triple>& in) {
        std::vector<Triple> out;
        out.reserve(in.size() * 2);
        for (const Triple& t : in) out.push_back(t);
        for (const Triple& t : in) out.push_back({t.o, t.r + n_raw, t.s});
        return out;
    };
    kg.valid = expand(raw.valid);
    kg.test = expand(raw.test);
    kg.truth = build_truth_index({&kg.train, &kg.valid, &kg.test},
                                 kg.n_relations(), kg.n_entities());
    return kg;
}

KnowledgeGraph load_dataset(const std::string& dir, bool strict) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw ParamError("data directory not found: " + dir);
    RawDataset raw;
    raw.train = load_triples((fs::path(dir) / "train.txt").string(), raw.vocab, false);
    // standard splits contain no unseen names, but non-strict mode extends
    raw.valid = load_triples((fs::path(dir) / "valid.txt").string(), raw.vocab, strict);
    raw.test = load_triples((fs::path(dir) / "test.txt").string(), raw.vocab, strict);
    return build_kg(raw);
}

RawDataset generate_toy_raw(std::size_t n, std::uint64_t seed) {
    if (n < 20)
        throw ParamError("toy graph needs at least 20 entities, got " + std::to_string(n));
    RawDataset raw;
    for (std::size_t e = 0; e < n; ++e) raw.vocab.add_entity(std::to_string(e));
    const int plus1 = raw.vocab.add_relation("plus1");
    const int plus2 = raw.vocab.add_relation("plus2");
    const int mirror = raw.vocab.add_relation("mirror");

    std::vector<Triple> all;
    all.reserve(3 * n);
    const int ni = static_cast<int>(n);
    for (int s = 0; s < ni; ++s) {
        all.push_back({s, plus1, (s + 1) % ni});
        all.push_back({s, plus2, (s + 2) % ni});
        all.push_back({s, mirror, ni - 1 - s});
    }
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);

    const std::size_t n_train = all.size() * 8 / 10;
    const std::size_t n_valid = all.size() / 10;
    raw.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    raw.valid.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                     all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    raw.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), all.end());
    return raw;
}

KnowledgeGraph generate_toy_kg(std::size_t n, std::uint64_t seed) {
    return build_kg(generate_toy_raw(n, seed));
}

// ---------------------------------------------------------------------------
// 1-N batches

PairIndex build_pair_index(const std::vector<Triple>& train) {
    PairIndex idx;
    std::unordered_map<std::int64_t, std::size_t> seen;
    // key on a wide mix of (s, r); relation ids are small so this cannot clash
    for (const Triple& t : train) {
        const std::int64_t key =
            (static_cast<std::int64_t>(t.s) << 24) | static_cast<std::int64_t>(t.r);
        auto it = seen.find(key);
        if (it == seen.end()) {
            seen.emplace(key, idx.pairs.size());
            idx.pairs.emplace_back(t.s, t.r);
            idx.objects.push_back({t.o});
        } else {
            idx.objects[it->second].push_back(t.o);
        }
    }
    for (auto& objs : idx.objects) {
        std::sort(objs.begin(), objs.end());
        objs.erase(std::unique(objs.begin(), objs.end()), objs.end());
    }
    return idx;
}

BatchStream::BatchStream(const PairIndex& index, std::size_t n_entities,
                         std::size_t batch_size, std::mt19937_64& rng)
    : index_(index), n_entities_(n_entities) {
    if (batch_size < 2)
        throw ParamError("batch size must be at least 2, got " + std::to_string(batch_size));
    if (index.size() < 2)
        throw BatchSizeError("need at least 2 distinct (s, r) pairs to train");
    order_.resize(index.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng);

    for (std::size_t begin = 0; begin < order_.size(); begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, order_.size());
        bounds_.emplace_back(begin, end);
    }
    // a trailing singleton would break batchnorm; fold it into its predecessor
    if (bounds_.size() > 1 && bounds_.back().second - bounds_.back().first < 2) {
        bounds_[bounds_.size() - 2].second = bounds_.back().second;
        bounds_.pop_back();
    }
}

std::optional<Batch1N> BatchStream::next() {
    if (pos_ >= bounds_.size()) return std::nullopt;
    const auto [begin, end] = bounds_[pos_++];
    Batch1N batch;
    batch.n_entities = n_entities_;
    const std::size_t rows = end - begin;
    batch.subjects.reserve(rows);
    batch.relations.reserve(rows);
    batch.labels.assign(rows * n_entities_, real_t{0});
    for (std::size_t i = begin; i < end; ++i) {
        const std::size_t p = order_[i];
        batch.subjects.push_back(index_.pairs[p].first);
        batch.relations.push_back(index_.pairs[p].second);
        for (int o : index_.objects[p])
            batch.labels[(i - begin) * n_entities_ + static_cast<std::size_t>(o)] = real_t{1};
    }
    return batch;
}

} // namespace dsparse
