// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kc {

namespace {

constexpr std::array<const char*, 12> kMonths = {"January", "February", "March",     "April",   "May",      "June",
                                                 "July",    "August",   "September", "October", "November", "December"};

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("corpus: cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  if (out.empty()) throw std::runtime_error("corpus: " + path.string() + " is empty");
  return out;
}

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::string first_word(const std::string& text) {
  auto w = split_words(text);
  return w.empty() ? std::string() : w.front();
}

std::vector<std::string> split_tsv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

std::string relation_name(Relation r) {
  switch (r) {
    case Relation::BirthDate:
      return "birth_date";
    case Relation::City:
      return "city";
    case Relation::Major:
      return "major";
    case Relation::University:
      return "university";
    case Relation::Company:
      return "company";
  }
  return "?";
}

std::optional<Relation> parse_relation(std::string_view text) {
  for (Relation r : kAllRelations) {
    if (relation_name(r) == text) return r;
  }
  return std::nullopt;
}

bool is_query_relation(Relation r) { return r == Relation::City || r == Relation::Major || r == Relation::Company; }

std::string knowledge_type_name(KnowledgeType t) { return t == KnowledgeType::Relevant ? "K_rel" : "K_compl"; }

std::string band_name(Band b) {
  switch (b) {
    case Band::Low:
      return "low";
    case Band::Medium:
      return "medium";
    case Band::High:
      return "high";
  }
  return "?";
}

FrequencyBand frequency_band(Band b) {
  switch (b) {
    case Band::Low:
      return {Band::Low, 1, 2, true, false};
    case Band::Medium:
      return {Band::Medium, 2, 5, true, true};
    case Band::High:
      break;
  }
  return {Band::High, 5, 27, false, true};
}

Band band_of(int frequency) {
  if (frequency < 2) return Band::Low;
  if (frequency <= 5) return Band::Medium;
  return Band::High;
}

const std::vector<std::string>& Pools::attribute_pool(Relation r) const {
  switch (r) {
    case Relation::City:
      return cities;
    case Relation::Major:
      return majors;
    case Relation::University:
      return universities;
    case Relation::Company:
      return companies;
    case Relation::BirthDate:
      break;
  }
  throw std::invalid_argument("corpus: birth_date has no attribute pool");
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("KCIRCUITS_DATA_DIR"); env != nullptr && *env != '\0') return env;
#ifdef KCIRCUITS_DATA_DIR
  return KCIRCUITS_DATA_DIR;
#else
  return "data";
#endif
}

Pools load_pools(const std::filesystem::path& dir) {
  Pools p;
  p.first_names = read_lines(dir / "first_names.txt");
  p.middle_names = read_lines(dir / "middle_names.txt");
  p.last_names = read_lines(dir / "last_names.txt");
  p.cities = read_lines(dir / "cities.txt");
  p.majors = read_lines(dir / "majors.txt");
  p.universities = read_lines(dir / "universities.txt");
  p.companies = read_lines(dir / "companies.txt");
  for (Relation r : kAllRelations) {
    auto& t = p.templates[static_cast<std::size_t>(r)];
    t = read_lines(dir / "templates" / (relation_name(r) + ".txt"));
    for (const auto& s : t) validate_template(s);
  }
  return p;
}

void validate_template(const std::string& tmpl) {
  if (tmpl.find("{s}") == std::string::npos) {
    throw std::invalid_argument("corpus: template lacks {s} placeholder: " + tmpl);
  }
  if (tmpl.find("{a}") == std::string::npos) {
    throw std::invalid_argument("corpus: template lacks {a} placeholder: " + tmpl);
  }
}

std::string render_template(const std::string& tmpl, const std::string& subject, const std::string& attribute) {
  validate_template(tmpl);
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl.compare(i, 3, "{s}") == 0) {
      out += subject;
      i += 2;
    } else if (tmpl.compare(i, 3, "{a}") == 0) {
      out += attribute;
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

std::vector<double> FrequencyParams::probabilities() const {
  if (min < 1 || max < min) throw std::invalid_argument("corpus: frequency range must satisfy 1 <= min <= max");
  if (!(scale >= 0.0)) throw std::invalid_argument("corpus: frequency scale must be non-negative");
  std::vector<double> p(static_cast<std::size_t>(max - min + 1), 0.0);
  if (scale == 0.0) {
    p[0] = 1.0;
    return p;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(-static_cast<double>(i) / scale);
  for (double& v : p) v /= total;
  return p;
}

double calibrate_frequency_scale(double p_max, int min, int max) {
  if (!(p_max > 0.0) || !(p_max < 1.0 / (max - min + 1))) {
    throw std::invalid_argument("corpus: target P(max) must lie in (0, 1/range)");
  }
  // P(max) grows with the scale, so bisect.
  double lo = 1e-6, hi = 1e6;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    const double pm = FrequencyParams{mid, min, max}.probabilities().back();
    (pm < p_max ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

std::vector<std::array<std::string, 3>> draw_names(const Pools& pools, std::size_t count,
                                                   const std::unordered_set<std::string>& exclude, Rng& rng) {
  const std::size_t capacity = pools.name_capacity();
  if (count + exclude.size() > capacity) {
    throw std::invalid_argument("corpus: " + std::to_string(count) + " names requested but only " +
                                std::to_string(capacity) + " combinations exist (" +
                                std::to_string(exclude.size()) + " already used)");
  }
  std::unordered_set<std::string> used;
  std::vector<std::array<std::string, 3>> out;
  out.reserve(count);
  while (out.size() < count) {
    std::array<std::string, 3> n{pools.first_names[rng.below(pools.first_names.size())],
                                 pools.middle_names[rng.below(pools.middle_names.size())],
                                 pools.last_names[rng.below(pools.last_names.size())]};
    std::string full = n[0] + " " + n[1] + " " + n[2];
    if (exclude.count(full) || !used.insert(full).second) continue;
    out.push_back(std::move(n));
  }
  return out;
}

std::string random_attribute(const Pools& pools, Relation r, Rng& rng) {
  if (r == Relation::BirthDate) {
    const auto day = 1 + rng.below(30);
    const auto month = rng.below(12);
    const auto year = 1900 + rng.below(126);
    return std::to_string(day) + " " + kMonths[month] + ", " + std::to_string(year);
  }
  const auto& pool = pools.attribute_pool(r);
  return pool[rng.below(pool.size())];
}

std::vector<EntityProfile> generate_entities(const Pools& pools, std::size_t n_entities, std::size_t relevant_parts,
                                             std::size_t new_parts, const FrequencyParams& freq, std::uint64_t seed,
                                             std::span<const std::array<std::string, 3>> relevant_names,
                                             const std::unordered_set<std::string>& exclude) {
  if (n_entities == 0) throw std::invalid_argument("corpus: n_entities must be at least 1");
  if (relevant_parts + new_parts == 0) throw std::invalid_argument("corpus: type ratio must have a positive part");
  const auto probs = freq.probabilities();
  const std::size_t n_rel = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_entities * relevant_parts) / static_cast<double>(relevant_parts + new_parts)));
  if (relevant_names.size() < n_rel) {
    throw std::invalid_argument("corpus: " + std::to_string(n_rel) + " relevant entities need known names, only " +
                                std::to_string(relevant_names.size()) + " supplied");
  }
  Rng rng(seed);
  std::unordered_set<std::string> taken = exclude;
  for (std::size_t i = 0; i < n_rel; ++i) {
    taken.insert(relevant_names[i][0] + " " + relevant_names[i][1] + " " + relevant_names[i][2]);
  }
  const auto fresh = draw_names(pools, n_entities - n_rel, taken, rng);

  std::vector<EntityProfile> out;
  out.reserve(n_entities);
  for (std::size_t i = 0; i < n_entities; ++i) {
    EntityProfile e;
    const auto& n = i < n_rel ? relevant_names[i] : fresh[i - n_rel];
    e.first = n[0];
    e.middle = n[1];
    e.last = n[2];
    e.knowledge_type = i < n_rel ? KnowledgeType::Relevant : KnowledgeType::CompletelyNew;
    for (Relation r : kAllRelations) e.attributes[static_cast<std::size_t>(r)] = random_attribute(pools, r, rng);
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < probs.size() && u >= probs[k]) u -= probs[k++];
    e.frequency = freq.min + static_cast<int>(k);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> render_corpus(const std::vector<EntityProfile>& entities, const Pools& pools,
                                       std::size_t templates_per_relation, std::uint64_t seed,
                                       std::span<const Relation> relations) {
  if (templates_per_relation == 0) throw std::invalid_argument("corpus: templates_per_relation must be positive");
  for (Relation r : relations) {
    const auto& t = pools.templates[static_cast<std::size_t>(r)];
    if (t.empty()) throw std::invalid_argument("corpus: relation " + relation_name(r) + " has no templates");
    for (const auto& s : t) validate_template(s);
  }
  Rng rng(seed);
  std::vector<std::string> segments;
  for (const auto& e : entities) {
    const std::string name = e.name();
    for (int rep = 0; rep < e.frequency; ++rep) {
      std::vector<std::string> sentences;
      for (Relation r : relations) {
        const auto& t = pools.templates[static_cast<std::size_t>(r)];
        const std::size_t n = std::min(templates_per_relation, t.size());
        sentences.push_back(render_template(t[rng.below(n)], name, e.attribute(r)));
      }
      rng.shuffle(sentences);
      std::string seg;
      for (const auto& s : sentences) {
        if (!seg.empty()) seg += ' ';
        seg += s;
      }
      segments.push_back(std::move(seg));
    }
  }
  rng.shuffle(segments);
  return segments;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      out.emplace_back(1, text[i]);
      ++i;
    }
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<unk>", "<sep>"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  for (auto& t : tokens) {
    if (t == "<pad>" || t == "<unk>" || t == "<sep>") continue;
    if (!v.index_.emplace(t, static_cast<int>(v.tokens_.size())).second) {
      throw std::invalid_argument("vocabulary: duplicate token " + t);
    }
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) words.insert(std::move(w));
  }
  if (words.empty()) throw std::invalid_argument("vocabulary: corpus is empty");
  return from_tokens({words.begin(), words.end()});
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text, std::size_t* unknown) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    if (auto id = find(w)) {
      ids.push_back(*id);
    } else {
      ids.push_back(kUnk);
      if (unknown) ++*unknown;
    }
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    const std::string& t = token(id);
    const bool punct = t.size() == 1 && !is_word_byte(static_cast<unsigned char>(t[0]));
    if (!out.empty() && !(punct && t != "(")) out += ' ';
    out += t;
  }
  return out;
}

FirstTokenRatio first_token_ratio(const std::vector<std::string>& pool) {
  std::set<std::string> firsts;
  for (const auto& a : pool) firsts.insert(first_word(a));
  return {firsts.size(), pool.size()};
}

std::string TaskFilter::name() const {
  if (knowledge_type) return knowledge_type_name(*knowledge_type);
  if (band) return band_name(*band);
  return "all";
}

bool TaskFilter::matches(const EntityProfile& e) const {
  if (knowledge_type && e.knowledge_type != *knowledge_type) return false;
  if (band && band_of(e.frequency) != *band) return false;
  return true;
}

std::optional<TaskFilter> TaskFilter::parse(std::string_view text) {
  if (text == "K_rel") return TaskFilter{KnowledgeType::Relevant, std::nullopt};
  if (text == "K_compl") return TaskFilter{KnowledgeType::CompletelyNew, std::nullopt};
  for (Band b : {Band::Low, Band::Medium, Band::High}) {
    if (band_name(b) == text) return TaskFilter{std::nullopt, b};
  }
  if (text == "all") return TaskFilter{};
  return std::nullopt;
}

std::vector<int> query_prompt(const Vocabulary& vocab, const Pools& pools, const std::string& subject, Relation r,
                              std::size_t* subject_len) {
  if (!is_query_relation(r)) {
    throw std::invalid_argument("corpus: " + relation_name(r) + " is not a query relation");
  }
  const std::string& tmpl = pools.templates[static_cast<std::size_t>(r)].front();
  validate_template(tmpl);
  const auto s_pos = tmpl.find("{s}");
  const auto a_pos = tmpl.find("{a}");
  if (s_pos != 0 || a_pos < s_pos) {
    throw std::invalid_argument("corpus: query template must start with {s} and end with {a}: " + tmpl);
  }
  std::vector<int> ids{Vocabulary::kSep};
  const auto subj = vocab.encode(subject);
  ids.insert(ids.end(), subj.begin(), subj.end());
  if (subject_len) *subject_len = subj.size();
  const auto rel = vocab.encode(tmpl.substr(3, a_pos - 3));
  ids.insert(ids.end(), rel.begin(), rel.end());
  return ids;
}

TaskSplit make_task_examples(const std::vector<EntityProfile>& entities, const Pools& pools, const Vocabulary& vocab,
                             std::span<const Relation> relations, const TaskFilter& filter, std::size_t k,
                             std::uint64_t seed) {
  for (Relation r : relations) {
    if (!is_query_relation(r)) {
      throw std::invalid_argument("corpus: task relation must be city, major or company, got " + relation_name(r));
    }
  }
  Rng rng(seed);
  std::vector<std::pair<std::size_t, Relation>> pairs;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (!filter.matches(entities[i])) continue;
    for (Relation r : relations) pairs.emplace_back(i, r);
  }
  rng.shuffle(pairs);

  auto first_id = [&](std::size_t i, Relation r) { return vocab.encode(first_word(entities[i].attribute(r))).front(); };

  TaskSplit split;
  for (const auto& [i, r] : pairs) {
    if (split.validation.size() >= k && split.test.size() >= k) break;
    const EntityProfile& e = entities[i];
    TaskExample ex;
    std::size_t subj_len = 0;
    ex.clean = query_prompt(vocab, pools, e.name(), r, &subj_len);
    ex.target = first_id(i, r);
    ex.attribute_tokens = vocab.encode(e.attribute(r));

    // Random partner first, then the nearest valid one after it.
    std::optional<std::size_t> partner;
    const std::size_t start = rng.below(entities.size());
    for (std::size_t off = 0; off < entities.size() && !partner; ++off) {
      const std::size_t j = (start + off) % entities.size();
      if (j == i || first_id(j, r) == ex.target) continue;
      if (vocab.encode(entities[j].name()).size() != subj_len) continue;
      partner = j;
    }
    if (!partner) continue;
    ex.corrupted = query_prompt(vocab, pools, entities[*partner].name(), r);
    ex.corrupted_target = first_id(*partner, r);
    ex.subject_begin = 1;
    ex.subject_end = 1 + subj_len;
    ex.relation_begin = ex.subject_end;
    ex.relation_end = ex.clean.size();
    ex.relation = r;
    ex.knowledge_type = e.knowledge_type;
    ex.frequency = e.frequency;
    ex.band = band_of(e.frequency);
    ex.entity = i;
    ex.corrupted_entity = *partner;
    (split.validation.size() < k ? split.validation : split.test).push_back(std::move(ex));
  }
  return split;
}

void write_entity_manifest(std::ostream& os, const std::vector<EntityProfile>& entities) {
  os << "first\tmiddle\tlast\tknowledge_type\tfrequency";
  for (Relation r : kAllRelations) os << '\t' << relation_name(r);
  os << '\n';
  for (const auto& e : entities) {
    os << e.first << '\t' << e.middle << '\t' << e.last << '\t' << knowledge_type_name(e.knowledge_type) << '\t'
       << e.frequency;
    for (const auto& a : e.attributes) os << '\t' << a;
    os << '\n';
  }
}

std::vector<EntityProfile> read_entity_manifest(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("manifest: missing header");
  std::vector<EntityProfile> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_tsv(line);
    if (f.size() != 5 + kRelationCount) throw std::runtime_error("manifest: bad row: " + line);
    EntityProfile e;
    e.first = f[0];
    e.middle = f[1];
    e.last = f[2];
    if (f[3] == "K_rel") {
      e.knowledge_type = KnowledgeType::Relevant;
    } else if (f[3] == "K_compl") {
      e.knowledge_type = KnowledgeType::CompletelyNew;
    } else {
      throw std::runtime_error("manifest: bad knowledge type " + f[3]);
    }
    e.frequency = std::stoi(f[4]);
    for (std::size_t r = 0; r < kRelationCount; ++r) e.attributes[r] = f[5 + r];
    out.push_back(std::move(e));
  }
  return out;
}

void write_task_examples(std::ostream& os, const std::vector<TaskExample>& examples, const Vocabulary& vocab) {
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["clean_text"] = vocab.decode(ex.clean);
    j["corrupted_text"] = vocab.decode(ex.corrupted);
    j["target_token"] = vocab.token(ex.target);
    j["clean"] = ex.clean;
    j["corrupted"] = ex.corrupted;
    j["target"] = ex.target;
    j["corrupted_target"] = ex.corrupted_target;
    j["attribute_tokens"] = ex.attribute_tokens;
    j["subject_span"] = {ex.subject_begin, ex.subject_end};
    j["relation_span"] = {ex.relation_begin, ex.relation_end};
    j["relation"] = relation_name(ex.relation);
    j["knowledge_type"] = knowledge_type_name(ex.knowledge_type);
    j["band"] = band_name(ex.band);
    j["frequency"] = ex.frequency;
    j["entity"] = ex.entity;
    j["corrupted_entity"] = ex.corrupted_entity;
    os << j.dump() << '\n';
  }
}

std::vector<TaskExample> read_task_examples(std::istream& is) {
  std::vector<TaskExample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TaskExample ex;
    ex.clean = j.at("clean").get<std::vector<int>>();
    ex.corrupted = j.at("corrupted").get<std::vector<int>>();
    ex.target = j.at("target").get<int>();
    ex.corrupted_target = j.at("corrupted_target").get<int>();
    ex.attribute_tokens = j.at("attribute_tokens").get<std::vector<int>>();
    ex.subject_begin = j.at("subject_span").at(0).get<std::size_t>();
    ex.subject_end = j.at("subject_span").at(1).get<std::size_t>();
    ex.relation_begin = j.at("relation_span").at(0).get<std::size_t>();
    ex.relation_end = j.at("relation_span").at(1).get<std::size_t>();
    const auto rel = parse_relation(j.at("relation").get<std::string>());
    if (!rel) throw std::runtime_error("task examples: bad relation");
    ex.relation = *rel;
    ex.knowledge_type =
        j.at("knowledge_type").get<std::string>() == "K_rel" ? KnowledgeType::Relevant : KnowledgeType::CompletelyNew;
    ex.frequency = j.at("frequency").get<int>();
    ex.band = band_of(ex.frequency);
    ex.entity = j.at("entity").get<std::size_t>();
    ex.corrupted_entity = j.at("corrupted_entity").get<std::size_t>();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace kc
