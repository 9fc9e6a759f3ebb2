#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "srki/kb.hpp"
#include "srki/retrieval.hpp"
#include "srki/rng.hpp"
#include "srki/tokenizer.hpp"

namespace srki {

inline constexpr std::string_view kRefusal = "UNKNOWN";

enum class QaType { single, multi_same, multi_diff, unanswerable };

inline constexpr std::array<QaType, 4> kAllQaTypes{QaType::single, QaType::multi_same,
                                                   QaType::multi_diff, QaType::unanswerable};

inline std::string to_string(QaType t) {
  switch (t) {
    case QaType::single: return "single";
    case QaType::multi_same: return "multi_same";
    case QaType::multi_diff: return "multi_diff";
    case QaType::unanswerable: return "unanswerable";
  }
  return "?";
}

inline QaType qa_type_from_string(const std::string& s) {
  for (QaType t : kAllQaTypes) {
    if (to_string(t) == s) return t;
  }
  throw FormatError("unknown qa_type '" + s + "'");
}

struct QaExample {
  std::string question;
  std::string answer;
  QaType qa_type = QaType::single;
  // Paired: factual_indices[j] and reference_indices[j] describe the same fact.
  std::vector<std::size_t> factual_indices;
  std::vector<std::size_t> reference_indices;

  // Every correct KB index, factual first.
  std::vector<std::size_t> correct_indices() const {
    std::vector<std::size_t> out = factual_indices;
    out.insert(out.end(), reference_indices.begin(), reference_indices.end());
    return out;
  }

  void validate() const {
    const std::size_t want = qa_type == QaType::single ? 1 : qa_type == QaType::unanswerable ? 0 : 2;
    if (factual_indices.size() != want || reference_indices.size() != want) {
      throw ConfigError("QaExample: " + to_string(qa_type) + " needs " + std::to_string(want) +
                        " factual and reference indices");
    }
  }

  friend bool operator==(const QaExample&, const QaExample&) = default;
};

struct VocabSpec {
  std::size_t subjects = 300;
  std::size_t relations = 16;
  std::size_t objects = 24;
  std::size_t aliases = 1;  // per subject and relation
  std::uint64_t seed = 1;

  void validate() const {
    if (subjects < 2 || relations < 2 || objects < 2) {
      throw ConfigError("VocabSpec: subject, relation and object pools must be >= 2");
    }
  }
};

inline std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

inline std::string subject_name(std::size_t i) { return numbered("ent", i, 4); }
inline std::string relation_name(std::size_t i) { return numbered("rel", i, 3); }
inline std::string object_name(std::size_t i) { return numbered("val", i, 3); }

// Alias surface forms per subject and relation name. Alias j of "ent0007" is
// "ent0007a<j>"; the canonical name itself is not an alias.
using AliasMap = std::map<std::string, std::vector<std::string>>;

inline AliasMap make_aliases(const VocabSpec& v) {
  AliasMap out;
  auto add = [&](const std::string& name) {
    auto& list = out[name];
    for (std::size_t j = 1; j <= v.aliases; ++j) list.push_back(name + "a" + std::to_string(j));
  };
  for (std::size_t i = 0; i < v.subjects; ++i) add(subject_name(i));
  for (std::size_t i = 0; i < v.relations; ++i) add(relation_name(i));
  return out;
}

inline const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words{"what", "is", "are", "the", "of", "and", "?",
                                              std::string(kRefusal)};
  return words;
}

inline Tokenizer make_tokenizer(const VocabSpec& v) {
  v.validate();
  std::vector<std::string> words = template_words();
  for (std::size_t i = 0; i < v.subjects; ++i) words.push_back(subject_name(i));
  for (std::size_t i = 0; i < v.relations; ++i) words.push_back(relation_name(i));
  for (std::size_t i = 0; i < v.objects; ++i) words.push_back(object_name(i));
  for (const auto& [name, list] : make_aliases(v)) {
    for (const auto& a : list) words.push_back(a);
  }
  return Tokenizer(words);
}

// Seeded triples with unique (subject, relation) pairs and uniform objects.
inline std::vector<Triple> generate_triples(std::size_t count, const VocabSpec& v) {
  v.validate();
  if (count < 1) throw ConfigError("generate_triples: count must be >= 1");
  const std::size_t capacity = v.subjects * v.relations;
  if (count > capacity) {
    throw ConfigError("generate_triples: " + std::to_string(count) + " triples exceed the " +
                      std::to_string(capacity) + " distinct (subject, relation) pairs");
  }
  Rng rng(derive_seed(v.seed, 0x7121));
  const auto pairs = rng.sample_without_replacement(capacity, count);
  std::vector<Triple> out;
  out.reserve(count);
  for (std::size_t p : pairs) {
    out.push_back({subject_name(p / v.relations), relation_name(p % v.relations),
                   object_name(rng.below(v.objects))});
  }
  return out;
}

// ---- QA rendering ------------------------------------------------------------

inline std::string render_question(QaType type, const std::vector<const Triple*>& facts,
                                   const std::string& subject = {},
                                   const std::string& relation = {}) {
  switch (type) {
    case QaType::single:
      return "what is the " + facts[0]->relation + " of " + facts[0]->subject + " ?";
    case QaType::multi_same:
      return "what are the " + facts[0]->relation + " and " + facts[1]->relation + " of " +
             facts[0]->subject + " ?";
    case QaType::multi_diff:
      return "what are the " + facts[0]->relation + " of " + facts[0]->subject + " and the " +
             facts[1]->relation + " of " + facts[1]->subject + " ?";
    case QaType::unanswerable:
      return "what is the " + relation + " of " + subject + " ?";
  }
  return {};
}

// Gold answer against a concrete KB: each fact's object followed by the id
// label of its reference entry.
inline std::string render_answer(const QaExample& ex, const KbStore& kb) {
  if (ex.qa_type == QaType::unanswerable) return std::string(kRefusal);
  std::string out;
  for (std::size_t j = 0; j < ex.factual_indices.size(); ++j) {
    if (j) out += " and ";
    const auto& ref = kb[ex.reference_indices[j]];
    if (!ref.id_label) throw ConfigError("render_answer: reference entry without id label");
    out += kb[ex.factual_indices[j]].triple.object + " " + *ref.id_label;
  }
  return out;
}

struct QaCounts {
  std::size_t single = 0;
  std::size_t multi_same = 0;
  std::size_t multi_diff = 0;
  std::size_t unanswerable = 0;

  std::size_t total() const { return single + multi_same + multi_diff + unanswerable; }
};

struct QaRequest {
  QaCounts counts;
  // Triples that may be asked about; empty means all.
  std::vector<char> eligible;
  // (subject, relation) pairs never to be asked (answerable or not).
  std::set<std::pair<std::string, std::string>> excluded_pairs;
};

// Generates QA examples over `kb`, which must be build_kb(triples, true, ...):
// triple i has factual index i and reference index i + triples.size().
inline std::vector<QaExample> generate_qa(const std::vector<Triple>& triples, const KbStore& kb,
                                          const QaRequest& req, std::uint64_t seed,
                                          const VocabSpec& vocab) {
  const std::size_t t = triples.size();
  if (kb.size() != 2 * t) throw ConfigError("generate_qa: KB must pair every triple with a reference");
  Rng rng(derive_seed(seed, 0x9A));
  std::vector<std::size_t> pool;
  std::map<std::string, std::vector<std::size_t>> by_subject;
  std::set<std::pair<std::string, std::string>> present;
  for (std::size_t i = 0; i < t; ++i) {
    present.emplace(triples[i].subject, triples[i].relation);
    if (!req.eligible.empty() && !req.eligible.at(i)) continue;
    if (req.excluded_pairs.count({triples[i].subject, triples[i].relation})) continue;
    pool.push_back(i);
    by_subject[triples[i].subject].push_back(i);
  }
  std::vector<std::string> multi_subjects;
  for (const auto& [s, idx] : by_subject) {
    if (idx.size() >= 2) multi_subjects.push_back(s);
  }
  if (pool.empty() && req.counts.total() > req.counts.unanswerable) {
    throw ConfigError("generate_qa: no eligible triples");
  }
  if (req.counts.multi_same && multi_subjects.empty()) {
    throw ConfigError("generate_qa: no subject with >= 2 relations for multi_same questions");
  }
  if (req.counts.multi_diff && by_subject.size() < 2) {
    throw ConfigError("generate_qa: multi_diff needs >= 2 distinct subjects");
  }

  auto make = [&](QaType type, std::vector<std::size_t> facts) {
    QaExample ex;
    ex.qa_type = type;
    std::vector<const Triple*> tp;
    for (std::size_t f : facts) {
      tp.push_back(&triples[f]);
      ex.factual_indices.push_back(f);
      ex.reference_indices.push_back(f + t);
    }
    ex.question = render_question(type, tp);
    ex.answer = render_answer(ex, kb);
    return ex;
  };

  std::vector<QaExample> out;
  for (std::size_t n = 0; n < req.counts.single; ++n) {
    out.push_back(make(QaType::single, {pool[rng.below(pool.size())]}));
  }
  for (std::size_t n = 0; n < req.counts.multi_same; ++n) {
    const auto& idx = by_subject[multi_subjects[rng.below(multi_subjects.size())]];
    const auto pick = rng.sample_without_replacement(idx.size(), 2);
    out.push_back(make(QaType::multi_same, {idx[pick[0]], idx[pick[1]]}));
  }
  for (std::size_t n = 0; n < req.counts.multi_diff; ++n) {
    const std::size_t a = pool[rng.below(pool.size())];
    std::size_t b = pool[rng.below(pool.size())];
    while (triples[b].subject == triples[a].subject) b = pool[rng.below(pool.size())];
    out.push_back(make(QaType::multi_diff, {a, b}));
  }
  for (std::size_t n = 0; n < req.counts.unanswerable; ++n) {
    std::string s, r;
    std::size_t guard = 0;
    do {
      s = subject_name(rng.below(vocab.subjects));
      r = relation_name(rng.below(vocab.relations));
      if (++guard > 1000000) throw ConfigError("generate_qa: no absent (subject, relation) pair");
    } while (present.count({s, r}) || req.excluded_pairs.count({s, r}));
    QaExample ex;
    ex.qa_type = QaType::unanswerable;
    ex.question = render_question(QaType::unanswerable, {}, s, r);
    ex.answer = std::string(kRefusal);
    out.push_back(std::move(ex));
  }
  return out;
}

// (subject, relation) pairs a question asks about.
inline std::vector<std::pair<std::string, std::string>> asked_pairs(const QaExample& ex,
                                                                    const std::vector<Triple>& triples) {
  std::vector<std::pair<std::string, std::string>> out;
  if (ex.qa_type == QaType::unanswerable) {
    // "what is the REL of SUBJ ?"
    const auto words = encoder_words(ex.question);
    out.emplace_back(words.at(5), words.at(3));
    return out;
  }
  for (std::size_t f : ex.factual_indices) out.emplace_back(triples[f].subject, triples[f].relation);
  return out;
}

struct QaSplit {
  std::vector<QaExample> train;
  std::vector<QaExample> test;
};

// Test questions are drawn first; every (subject, relation) pair they ask
// about is then excluded from training questions.
inline QaSplit generate_qa_split(const std::vector<Triple>& triples, const KbStore& kb,
                                 std::size_t qa_source_triples, const QaCounts& train,
                                 const QaCounts& test, std::uint64_t seed, const VocabSpec& vocab) {
  QaRequest req;
  req.eligible.assign(triples.size(), 0);
  for (std::size_t i = 0; i < std::min(qa_source_triples, triples.size()); ++i) req.eligible[i] = 1;
  req.counts = test;
  QaSplit split;
  split.test = generate_qa(triples, kb, req, derive_seed(seed, 1), vocab);
  for (const auto& ex : split.test) {
    for (auto& p : asked_pairs(ex, triples)) req.excluded_pairs.insert(p);
  }
  req.counts = train;
  split.train = generate_qa(triples, kb, req, derive_seed(seed, 2), vocab);
  return split;
}

// Replaces each subject/relation word of every question with a seeded choice
// among its aliases. Answers and indices are untouched.
inline std::vector<QaExample> alias_perturb(const std::vector<QaExample>& qa, const AliasMap& aliases,
                                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xA1A5));
  std::vector<QaExample> out = qa;
  for (auto& ex : out) {
    std::string q;
    std::size_t i = 0;
    const std::string& s = ex.question;
    while (i < s.size()) {
      std::size_t j = s.find(' ', i);
      if (j == std::string::npos) j = s.size();
      std::string w = s.substr(i, j - i);
      if (auto it = aliases.find(w); it != aliases.end() && !it->second.empty()) {
        w = it->second[rng.below(it->second.size())];
      }
      if (!q.empty()) q += ' ';
      q += w;
      i = j + 1;
    }
    ex.question = q;
  }
  return out;
}

// ---- batching ------------------------------------------------------------------

struct BatchMix {
  double single = 0.4;
  double multi = 0.4;  // split evenly between multi_same and multi_diff
  double unanswerable = 0.2;
};

struct Batch {
  std::vector<QaExample> examples;  // indices remapped into `pool`, answers re-rendered
  KbStore pool;
  IndexList source;  // pool position -> universe index
};

// Builds a shuffled injection pool: the given universe entries plus paired
// factual/reference negatives up to `size`. With `relabel`, reference entries
// receive fresh id labels.
inline std::pair<KbStore, IndexList> make_pool(const KbStore& universe,
                                               const std::vector<std::size_t>& correct,
                                               std::size_t size, Rng& rng, bool relabel) {
  std::set<std::size_t> chosen(correct.begin(), correct.end());
  if (chosen.size() > size) {
    throw ConfigError("pool size " + std::to_string(size) + " cannot hold " +
                      std::to_string(chosen.size()) + " correct entries");
  }
  if (size > universe.size()) {
    throw ConfigError("pool size " + std::to_string(size) + " exceeds KB universe of " +
                      std::to_string(universe.size()));
  }
  const bool paired = universe.size() % 2 == 0 && universe.size() >= 2 &&
                      universe[universe.size() / 2].kind == EntryKind::reference_id;
  const std::size_t t = paired ? universe.size() / 2 : universe.size();
  std::set<std::size_t> correct_triples;
  for (std::size_t c : correct) correct_triples.insert(paired ? c % t : c);
  std::vector<char> used(t, 0);
  for (std::size_t c : correct_triples) used[c] = 1;
  IndexList order(chosen.begin(), chosen.end());
  while (order.size() < size) {
    std::size_t tr = rng.below(t);
    if (used[tr]) {
      // Linear probe keeps the draw count bounded when the pool is nearly full.
      std::size_t probe = 0;
      while (used[tr] && probe++ < t) tr = (tr + 1) % t;
      if (used[tr]) throw ConfigError("make_pool: universe exhausted");
    }
    used[tr] = 1;
    order.push_back(tr);
    if (paired && order.size() < size) order.push_back(tr + t);
  }
  rng.shuffle(order);
  KbStore pool = universe.subset(order);
  if (relabel) pool = pool.relabeled(rng);
  return {std::move(pool), std::move(order)};
}

inline QaExample remap_example(const QaExample& ex, const IndexList& source, const KbStore& pool) {
  std::unordered_map<std::size_t, std::size_t> where;
  for (std::size_t i = 0; i < source.size(); ++i) where[source[i]] = i;
  QaExample out = ex;
  for (auto& f : out.factual_indices) f = where.at(f);
  for (auto& r : out.reference_indices) r = where.at(r);
  out.answer = render_answer(out, pool);
  return out;
}

// Picks a QA type by the mix, then an example of that type uniformly.
inline QaType draw_qa_type(Rng& rng, const BatchMix& mix) {
  const double total = mix.single + mix.multi + mix.unanswerable;
  const double u = rng.uniform() * total;
  if (u < mix.single) return QaType::single;
  if (u < mix.single + mix.multi / 2) return QaType::multi_same;
  if (u < mix.single + mix.multi) return QaType::multi_diff;
  return QaType::unanswerable;
}

inline Batch sample_batch(const std::vector<QaExample>& dataset, const KbStore& universe,
                          std::size_t pool_size, std::size_t batch_size, const BatchMix& mix,
                          std::uint64_t seed, bool relabel = true) {
  std::map<QaType, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_type[dataset[i].qa_type].push_back(i);
  Rng rng(derive_seed(seed, 0xBA7C));
  std::vector<const QaExample*> picked;
  std::vector<std::size_t> correct;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const QaType type = draw_qa_type(rng, mix);
    const auto& ids = by_type[type];
    if (ids.empty()) throw ConfigError("sample_batch: dataset has no " + to_string(type) + " examples");
    const QaExample& ex = dataset[ids[rng.below(ids.size())]];
    picked.push_back(&ex);
    for (std::size_t c : ex.correct_indices()) correct.push_back(c);
  }
  Batch batch;
  auto [pool, source] = make_pool(universe, correct, pool_size, rng, relabel);
  batch.pool = std::move(pool);
  batch.source = std::move(source);
  for (const QaExample* ex : picked) batch.examples.push_back(remap_example(*ex, batch.source, batch.pool));
  return batch;
}

// ---- token sequences ----------------------------------------------------------

struct TokenizedExample {
  std::vector<TokenId> prompt;   // <bos> question
  std::vector<TokenId> inputs;   // full sequence minus its last token
  std::vector<TokenId> targets;  // full sequence shifted left
  std::vector<bool> answer_mask; // true where the target belongs to the answer (or <eos>)
};

inline TokenizedExample tokenize_example(const QaExample& ex, const Tokenizer& tok) {
  TokenizedExample out;
  out.prompt.push_back(tok.bos());
  for (TokenId id : tok.encode(ex.question)) out.prompt.push_back(id);
  std::vector<TokenId> full = out.prompt;
  for (TokenId id : tok.encode(ex.answer)) full.push_back(id);
  full.push_back(tok.eos());
  out.inputs.assign(full.begin(), full.end() - 1);
  out.targets.assign(full.begin() + 1, full.end());
  for (std::size_t i = 0; i < out.targets.size(); ++i) {
    out.answer_mask.push_back(i + 1 >= out.prompt.size());
  }
  return out;
}

// ---- persistence -----------------------------------------------------------------

inline nlohmann::json qa_to_json(const QaExample& ex) {
  return {{"question", ex.question},
          {"answer", ex.answer},
          {"qa_type", to_string(ex.qa_type)},
          {"factual_indices", ex.factual_indices},
          {"reference_indices", ex.reference_indices}};
}

inline QaExample qa_from_json(const nlohmann::json& j) {
  try {
    QaExample ex;
    ex.question = j.at("question").get<std::string>();
    ex.answer = j.at("answer").get<std::string>();
    ex.qa_type = qa_type_from_string(j.at("qa_type").get<std::string>());
    ex.factual_indices = j.at("factual_indices").get<std::vector<std::size_t>>();
    ex.reference_indices = j.at("reference_indices").get<std::vector<std::size_t>>();
    ex.validate();
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("qa record: ") + e.what());
  }
}

// One object per line; `split` adds a "split" field when non-empty.
inline void write_qa_jsonl(std::ostream& os, const std::vector<QaExample>& qa,
                           const std::string& split = {}) {
  for (const auto& ex : qa) {
    auto j = qa_to_json(ex);
    if (!split.empty()) j["split"] = split;
    os << j.dump() << '\n';
  }
}

inline QaSplit read_qa_jsonl(std::istream& is) {
  QaSplit out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string split = j.value("split", std::string("train"));
      (split == "test" ? out.test : out.train).push_back(qa_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("qa line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace srki
