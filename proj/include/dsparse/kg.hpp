#pragma once

// Triple corpora: loading, vocabularies, inverse-relation augmentation, the
// filtered truth index, 1-N batch generation, and the synthetic toy graph.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsparse/array.hpp"
#include "dsparse/errors.hpp"

namespace dsparse {

struct Triple {
    int s = 0;
    int r = 0;
    int o = 0;
    bool operator==(const Triple&) const = default;
};

struct Vocab {
    std::vector<std::string> entity_names;
    std::vector<std::string> relation_names;
    std::unordered_map<std::string, int> entity_ids;
    std::unordered_map<std::string, int> relation_ids;
    bool augmented = false; // inverse relations appended

    std::size_t n_entities() const { return entity_names.size(); }
    std::size_t n_relations() const { return relation_names.size(); }

    int add_entity(const std::string& name);   // existing id if known
    int add_relation(const std::string& name);
    int entity(const std::string& name) const; // VocabError if unknown
    int relation(const std::string& name) const;
};

// One triple per line: subject <TAB> relation <TAB> object.
// With strict=true, names missing from vocab raise VocabError; otherwise the
// vocab is extended in first-seen order.
std::vector<Triple> load_triples(const std::string& path, Vocab& vocab, bool strict);
void save_triples(const std::string& path, const std::vector<Triple>& triples,
                  const Vocab& vocab);

// Appends (o, r_inv, s) for every (s, r, o); relation i gets its inverse at
// id i + |R|, named with an "_inv" suffix. Refuses to run twice.
std::pair<std::vector<Triple>, Vocab> add_inverse_relations(const std::vector<Triple>& triples,
                                                            const Vocab& vocab);

struct RawDataset {
    Vocab vocab;
    std::vector<Triple> train, valid, test;
};

struct KnowledgeGraph {
    Vocab vocab;                      // augmented
    std::size_t n_raw_relations = 0;  // before augmentation
    std::vector<Triple> train, valid, test; // augmented (both directions)
    // (s, r) -> sorted object ids over the union of all three splits
    std::unordered_map<std::int64_t, std::vector<int>> truth;

    std::size_t n_entities() const { return vocab.n_entities(); }
    std::size_t n_relations() const { return vocab.n_relations(); }
    std::int64_t key(int s, int r) const {
        return static_cast<std::int64_t>(s) * static_cast<std::int64_t>(n_relations()) + r;
    }
    const std::vector<int>& filter_set(int s, int r) const;
};

std::unordered_map<std::int64_t, std::vector<int>>
build_truth_index(const std::vector<const std::vector<Triple>*>& splits,
                  std::size_t n_relations, std::size_t n_entities);

// Augments every split with inverse relations and builds the truth index.
KnowledgeGraph build_kg(const RawDataset& raw);

// Reads train.txt / valid.txt / test.txt from dir. The train file defines the
// vocabulary; valid/test are strict by default.
KnowledgeGraph load_dataset(const std::string& dir, bool strict = true);

// Deterministic composition-structured graph over entities 0..n-1 with
// relations plus1 (o = s+1 mod n), plus2 (o = s+2 mod n) and
// mirror (o = n-1-s). Triples are split 80/10/10 by seeded shuffle.
RawDataset generate_toy_raw(std::size_t n_entities, std::uint64_t seed);
KnowledgeGraph generate_toy_kg(std::size_t n_entities, std::uint64_t seed);

// ---------------------------------------------------------------------------
// 1-N batches

struct Batch1N {
    std::vector<int> subjects;   // B
    std::vector<int> relations;  // B
    std::vector<real_t> labels;  // B x |E| multi-hot
    std::size_t n_entities = 0;
    std::size_t size() const { return subjects.size(); }
};

// Unique (s, r) pairs of the training split, first-seen order, with the full
// object list per pair.
struct PairIndex {
    std::vector<std::pair<int, int>> pairs;
    std::vector<std::vector<int>> objects;
    std::size_t size() const { return pairs.size(); }
};

PairIndex build_pair_index(const std::vector<Triple>& train);

// One epoch of shuffled batches. A trailing batch of a single pair is merged
// into its predecessor so batchnorm always sees at least two rows.
class BatchStream {
public:
    BatchStream(const PairIndex& index, std::size_t n_entities,
                std::size_t batch_size, std::mt19937_64& rng);
    std::optional<Batch1N> next();
    std::size_t n_batches() const { return bounds_.size(); }

private:
    const PairIndex& index_;
    std::size_t n_entities_;
    std::vector<std::size_t> order_;
    std::vector<std::pair<std::size_t, std::size_t>> bounds_; // [begin, end)
    std::size_t pos_ = 0;
};

} // namespace dsparse
