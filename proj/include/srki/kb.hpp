#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "srki/adapters.hpp"
#include "srki/errors.hpp"
#include "srki/rng.hpp"
#include "srki/tensor.hpp"

namespace srki {

struct Triple {
  std::string subject;
  std::string relation;
  std::string object;

  void validate() const {
    if (subject.empty() || relation.empty() || object.empty()) {
      throw ConfigError("Triple: subject, relation and object must be non-empty");
    }
  }
  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

enum class EntryKind { factual, reference_id };

inline std::string to_string(EntryKind k) {
  return k == EntryKind::factual ? "factual" : "reference_id";
}

inline EntryKind entry_kind_from_string(std::string_view s) {
  if (s == "factual") return EntryKind::factual;
  if (s == "reference_id") return EntryKind::reference_id;
  throw FormatError("unknown KB entry kind '" + std::string(s) + "'");
}

inline std::string render_key_text(const Triple& t, EntryKind kind) {
  t.validate();
  const std::string fact = "the " + t.relation + " of " + t.subject;
  if (kind == EntryKind::factual) return fact;
  return "The ID of the knowledge '" + fact + " is " + t.object + "'";
}

// Splits text into encoder words: whitespace separated, surrounding quote and
// punctuation characters stripped.
inline std::vector<std::string> encoder_words(std::string_view s) {
  constexpr std::string_view strip = "'\"?.,;:()[]";
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    std::string_view w = s.substr(i, j - i);
    while (!w.empty() && strip.find(w.front()) != std::string_view::npos) w.remove_prefix(1);
    while (!w.empty() && strip.find(w.back()) != std::string_view::npos) w.remove_suffix(1);
    if (!w.empty()) words.emplace_back(w);
    i = j;
  }
  return words;
}

namespace detail {

inline void add_feature(std::vector<double>& acc, std::uint64_t seed, std::string_view tag) {
  Rng rng(derive_seed(seed, fnv1a64(tag)));
  for (double& v : acc) v += rng.normal();
}

}  // namespace detail

// Unnormalized feature vector the encoder adds for a single word.
inline std::vector<double> word_feature(std::string_view word, std::uint64_t seed, std::size_t dim) {
  std::vector<double> acc(dim, 0.0);
  detail::add_feature(acc, seed, "w:" + std::string(word));
  return acc;
}

// Deterministic hash-feature sentence encoder: every word and adjacent word
// pair contributes a seeded Gaussian vector; the sum is scaled to unit norm.
inline std::vector<double> encode_text(std::string_view s, std::uint64_t seed,
                                       std::size_t dim = 32) {
  if (dim == 0) throw ConfigError("encode_text: dimension must be >= 1");
  const auto words = encoder_words(s);
  if (words.empty()) throw ConfigError("encode_text: empty text");
  std::vector<double> acc(dim, 0.0);
  for (const auto& w : words) detail::add_feature(acc, seed, "w:" + w);
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    detail::add_feature(acc, seed, "b:" + words[i] + " " + words[i + 1]);
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : acc) v /= norm;
  return acc;
}

struct KbEntry {
  Triple triple;
  EntryKind kind = EntryKind::factual;
  std::string key_text;
  std::string value_text;
  std::optional<std::string> id_label;
  std::vector<double> key_embedding;
  std::vector<double> value_embedding;
};

struct KbOptions {
  std::size_t dim = 32;                  // P
  std::uint64_t encoder_seed = 0x5EEDu;  // fixed per run; independent of label draws
  std::size_t id_length = 3;
};

inline std::string random_id_label(Rng& rng, std::size_t length) {
  std::string s(length, 'A');
  for (char& c : s) c = static_cast<char>('A' + rng.below(26));
  return s;
}

inline KbEntry make_entry(const Triple& t, EntryKind kind, std::optional<std::string> label,
                          const KbOptions& opt) {
  KbEntry e;
  e.triple = t;
  e.kind = kind;
  e.key_text = render_key_text(t, kind);
  if (kind == EntryKind::reference_id) {
    if (!label || label->empty()) throw ConfigError("reference entry requires an id label");
    e.value_text = *label;
    e.id_label = std::move(label);
  } else {
    e.value_text = t.object;
  }
  e.key_embedding = encode_text(e.key_text, opt.encoder_seed, opt.dim);
  e.value_embedding = encode_text(e.value_text, opt.encoder_seed, opt.dim);
  return e;
}

// Ordered, immutable collection of KB entries with stacked embedding matrices.
class KbStore {
 public:
  KbStore() = default;
  KbStore(std::vector<KbEntry> entries, KbOptions options)
      : entries_(std::move(entries)), options_(options) {
    rebuild_matrices();
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return options_.dim; }
  const KbOptions& options() const { return options_; }
  const std::vector<KbEntry>& entries() const { return entries_; }
  const KbEntry& operator[](std::size_t i) const { return entries_.at(i); }

  const Tensor& key_matrix() const { return keys_; }
  const Tensor& value_matrix() const { return values_; }

  const std::vector<std::string>& warnings() const { return warnings_; }
  void add_warning(std::string w) { warnings_.push_back(std::move(w)); }

  // Entries at `indices`, in that order.
  KbStore subset(std::span<const std::size_t> indices) const {
    std::vector<KbEntry> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(entries_.at(i));
    return KbStore(std::move(out), options_);
  }

  // Copy with fresh id labels on every reference entry.
  KbStore relabeled(Rng& rng) const {
    std::vector<KbEntry> out = entries_;
    for (auto& e : out) {
      if (e.kind != EntryKind::reference_id) continue;
      // The key text does not mention the label, so only the value is re-encoded.
      e.id_label = random_id_label(rng, options_.id_length);
      e.value_text = *e.id_label;
      e.value_embedding = encode_text(e.value_text, options_.encoder_seed, options_.dim);
    }
    return KbStore(std::move(out), options_);
  }

 private:
  void rebuild_matrices() {
    const std::size_t m = entries_.size(), p = options_.dim;
    keys_ = Tensor::matrix(m, p);
    values_ = Tensor::matrix(m, p);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& e = entries_[i];
      if (e.key_embedding.size() != p || e.value_embedding.size() != p) {
        throw DimensionError("KbStore: entry " + std::to_string(i) + " embedding dimension");
      }
      std::copy(e.key_embedding.begin(), e.key_embedding.end(), keys_.row(i).begin());
      std::copy(e.value_embedding.begin(), e.value_embedding.end(), values_.row(i).begin());
    }
  }

  std::vector<KbEntry> entries_;
  KbOptions options_;
  Tensor keys_;
  Tensor values_;
  std::vector<std::string> warnings_;
};

// One factual entry per triple at index i; with reference ids, the paired
// reference entry sits at i + triples.size().
inline KbStore build_kb(const std::vector<Triple>& triples, bool include_reference_ids,
                        std::uint64_t seed, const KbOptions& options = {}) {
  if (triples.empty()) throw ConfigError("build_kb: no triples");
  std::vector<KbEntry> entries;
  entries.reserve(triples.size() * (include_reference_ids ? 2 : 1));
  std::set<std::pair<std::string, std::string>> seen;
  std::vector<std::string> warnings;
  for (const auto& t : triples) {
    if (!seen.emplace(t.subject, t.relation).second) {
      warnings.push_back("duplicate (subject, relation): (" + t.subject + ", " + t.relation + ")");
    }
    entries.push_back(make_entry(t, EntryKind::factual, std::nullopt, options));
  }
  if (include_reference_ids) {
    Rng rng(derive_seed(seed, 0x1DAB));
    for (const auto& t : triples) {
      entries.push_back(make_entry(t, EntryKind::reference_id,
                                   random_id_label(rng, options.id_length), options));
    }
  }
  KbStore store(std::move(entries), options);
  for (auto& w : warnings) store.add_warning(std::move(w));
  return store;
}

struct KbProjection {
  Tensor keys;    // M x D
  Tensor values;  // M x D
};

inline KbProjection project_kb(const KbStore& kb, const AdapterSet& adapters, std::size_t layer) {
  if (layer >= adapters.layers.size()) {
    throw DimensionError("project_kb: layer " + std::to_string(layer) + " out of range");
  }
  const auto& a = adapters.layers[layer];
  if (a.key.rows() != kb.dim() || a.value.rows() != kb.dim()) {
    throw DimensionError("project_kb: adapter expects P=" + std::to_string(a.key.rows()) +
                         ", KB has P=" + std::to_string(kb.dim()));
  }
  return {matmul(kb.key_matrix(), a.key), matmul(kb.value_matrix(), a.value)};
}

// ---- JSONL persistence ---------------------------------------------------

inline void write_triples_jsonl(std::ostream& os, const std::vector<Triple>& triples) {
  for (const auto& t : triples) {
    nlohmann::json j{{"subject", t.subject}, {"relation", t.relation}, {"object", t.object}};
    os << j.dump() << '\n';
  }
}

inline Triple triple_from_json(const nlohmann::json& j) {
  try {
    Triple t{j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
             j.at("object").get<std::string>()};
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("triple record: ") + e.what());
  }
}

inline std::vector<Triple> read_triples_jsonl(std::istream& is) {
  std::vector<Triple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(triple_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("triples line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_kb_jsonl(std::ostream& os, const KbStore& kb) {
  for (const auto& e : kb.entries()) {
    nlohmann::json j{{"subject", e.triple.subject},
                     {"relation", e.triple.relation},
                     {"object", e.triple.object},
                     {"kind", to_string(e.kind)}};
    j["id_label"] = e.id_label ? nlohmann::json(*e.id_label) : nlohmann::json(nullptr);
    os << j.dump() << '\n';
  }
}

// Embeddings are recomputed from the texts on load.
inline KbStore read_kb_jsonl(std::istream& is, const KbOptions& options) {
  std::vector<KbEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const Triple t = triple_from_json(j);
      const EntryKind kind = entry_kind_from_string(j.at("kind").get<std::string>());
      std::optional<std::string> label;
      if (j.contains("id_label") && !j["id_label"].is_null()) label = j["id_label"].get<std::string>();
      entries.push_back(make_entry(t, kind, label, options));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("kb line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return KbStore(std::move(entries), options);
}

}  // namespace srki
