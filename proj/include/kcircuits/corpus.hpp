// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic biography corpus: fictional people with five attributes each,
// rendered from sentence templates, a word-level tokenizer, and clean /
// corrupted factual-recall query pairs.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kcircuits/rng.hpp"

namespace kc {

enum class Relation : std::uint8_t { BirthDate = 0, City = 1, Major = 2, University = 3, Company = 4 };
inline constexpr std::size_t kRelationCount = 5;
inline constexpr std::array<Relation, kRelationCount> kAllRelations = {
    Relation::BirthDate, Relation::City, Relation::Major, Relation::University, Relation::Company};

std::string relation_name(Relation r);  // birth_date, city, major, university, company
std::optional<Relation> parse_relation(std::string_view text);
/// Relations usable as recall queries (city, major, company).
bool is_query_relation(Relation r);

enum class KnowledgeType : std::uint8_t { Relevant, CompletelyNew };
std::string knowledge_type_name(KnowledgeType t);  // K_rel, K_compl

enum class Band : std::uint8_t { Low, Medium, High };
std::string band_name(Band b);  // low, medium, high

/// Low = [1, 2), Medium = [2, 5], High = (5, 27].
struct FrequencyBand {
  Band label;
  double lo;
  double hi;
  bool lo_inclusive;
  bool hi_inclusive;
  bool contains(double f) const {
    return (lo_inclusive ? f >= lo : f > lo) && (hi_inclusive ? f <= hi : f < hi);
  }
};
FrequencyBand frequency_band(Band b);
Band band_of(int frequency);

struct Triple {
  std::string subject;
  Relation relation;
  std::string attribute;
};

struct EntityProfile {
  std::string first, middle, last;
  std::array<std::string, kRelationCount> attributes;
  KnowledgeType knowledge_type = KnowledgeType::CompletelyNew;
  int frequency = 1;

  std::string name() const { return first + " " + middle + " " + last; }
  const std::string& attribute(Relation r) const { return attributes[static_cast<std::size_t>(r)]; }
  Triple triple(Relation r) const { return {name(), r, attribute(r)}; }
  bool operator==(const EntityProfile&) const = default;
};

/// Name pools, attribute pools and templates, loaded from a data directory.
struct Pools {
  std::vector<std::string> first_names, middle_names, last_names;
  std::vector<std::string> cities, majors, universities, companies;
  /// Templates per relation, each containing {s} and {a}. The first template
  /// of a query relation is its query form.
  std::array<std::vector<std::string>, kRelationCount> templates;

  const std::vector<std::string>& attribute_pool(Relation r) const;
  std::size_t name_capacity() const { return first_names.size() * middle_names.size() * last_names.size(); }
};

/// Directory compiled into the library, overridable with KCIRCUITS_DATA_DIR.
std::filesystem::path default_data_dir();
Pools load_pools(const std::filesystem::path& dir);
/// Throws std::invalid_argument when a template lacks {s} or {a}.
void validate_template(const std::string& tmpl);
std::string render_template(const std::string& tmpl, const std::string& subject, const std::string& attribute);

/// Truncated discrete exponential on [min, max]: P(k) ∝ exp(-(k - min) / scale).
/// scale = 0 puts all mass on `min`.
struct FrequencyParams {
  double scale = 2.69;
  int min = 1;
  int max = 27;
  std::vector<double> probabilities() const;
};
/// Scale at which P(max) equals `p_max` (used for the default: 1 / 50000).
double calibrate_frequency_scale(double p_max, int min = 1, int max = 27);

/// Draws `count` unique names not in `exclude` and not already drawn.
/// Throws std::invalid_argument when the name space cannot supply them.
std::vector<std::array<std::string, 3>> draw_names(const Pools& pools, std::size_t count,
                                                   const std::unordered_set<std::string>& exclude, Rng& rng);

std::string random_attribute(const Pools& pools, Relation r, Rng& rng);

/// Entities with exactly round(n * relevant_parts / (relevant_parts + new_parts))
/// Relevant entities, listed first. Relevant names come from `relevant_names`
/// (which must hold enough entries); CompletelyNew names are fresh and avoid
/// `exclude`. Frequencies are i.i.d. from `freq`.
std::vector<EntityProfile> generate_entities(const Pools& pools, std::size_t n_entities, std::size_t relevant_parts,
                                             std::size_t new_parts, const FrequencyParams& freq, std::uint64_t seed,
                                             std::span<const std::array<std::string, 3>> relevant_names = {},
                                             const std::unordered_set<std::string>& exclude = {});

/// One segment per appearance: the entity's sentences for `relations`, each
/// from a template drawn among the first `templates_per_relation`, in shuffled
/// order. Segments of all entities are shuffled together.
std::vector<std::string> render_corpus(const std::vector<EntityProfile>& entities, const Pools& pools,
                                       std::size_t templates_per_relation, std::uint64_t seed,
                                       std::span<const Relation> relations = kAllRelations);

/// Alphanumeric runs (plus any non-ASCII bytes) form words; every other
/// non-space character is a token of its own.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kSep = 2;

  Vocabulary();
  /// Specials, then the sorted set of words found in `texts`.
  static Vocabulary build(std::span<const std::string> texts);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<int> find(std::string_view word) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Unknown words map to kUnk and are counted in `unknown`.
  std::vector<int> encode(std::string_view text, std::size_t* unknown = nullptr) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Distinct first words over pool size.
struct FirstTokenRatio {
  std::size_t unique_first = 0;
  std::size_t total = 0;
};
FirstTokenRatio first_token_ratio(const std::vector<std::string>& pool);

struct TaskExample {
  std::vector<int> clean;
  std::vector<int> corrupted;
  int target = 0;
  int corrupted_target = 0;
  std::vector<int> attribute_tokens;  // full attribute, for exact-match decoding
  std::size_t subject_begin = 0, subject_end = 0;    // [begin, end)
  std::size_t relation_begin = 0, relation_end = 0;  // [begin, end)
  Relation relation = Relation::City;
  KnowledgeType knowledge_type = KnowledgeType::CompletelyNew;
  Band band = Band::Low;
  int frequency = 1;
  std::size_t entity = 0;            // index into the entity list
  std::size_t corrupted_entity = 0;  // index into the entity list
  bool operator==(const TaskExample&) const = default;
};

/// Selects entities by knowledge type or frequency band.
struct TaskFilter {
  std::optional<KnowledgeType> knowledge_type;
  std::optional<Band> band;
  std::string name() const;  // K_rel, K_compl, low, medium, high, all
  bool matches(const EntityProfile& e) const;
  static std::optional<TaskFilter> parse(std::string_view text);
};

/// Query prompt for (entity, relation): <sep>, subject words, then the query
/// template's words before the attribute.
std::vector<int> query_prompt(const Vocabulary& vocab, const Pools& pools, const std::string& subject, Relation r,
                              std::size_t* subject_len = nullptr);

struct TaskSplit {
  std::vector<TaskExample> validation;
  std::vector<TaskExample> test;
};

/// Up to `k` validation and `k` test examples over matching (entity, relation)
/// pairs, with no pair shared between the two sets. Corrupted subjects are
/// other entities of `entities` whose attribute first token differs from the
/// target's. Pairs without such a partner are skipped.
TaskSplit make_task_examples(const std::vector<EntityProfile>& entities, const Pools& pools, const Vocabulary& vocab,
                             std::span<const Relation> relations, const TaskFilter& filter, std::size_t k,
                             std::uint64_t seed);

void write_entity_manifest(std::ostream& os, const std::vector<EntityProfile>& entities);
std::vector<EntityProfile> read_entity_manifest(std::istream& is);
void write_task_examples(std::ostream& os, const std::vector<TaskExample>& examples, const Vocabulary& vocab);
std::vector<TaskExample> read_task_examples(std::istream& is);

}  // namespace kc
