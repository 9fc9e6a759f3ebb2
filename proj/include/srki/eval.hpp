#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "srki/datagen.hpp"
#include "srki/model.hpp"
#include "srki/retrieval.hpp"

namespace srki {

// ---- ranking metrics ---------------------------------------------------------

inline double recall_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> correct,
                          std::size_t k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (correct.empty()) throw DegenerateError("recall_at_k: empty correct set");
  const std::set<std::size_t> top(ranked.begin(), ranked.begin() + std::min(k, ranked.size()));
  const std::set<std::size_t> want(correct.begin(), correct.end());
  std::size_t hit = 0;
  for (std::size_t c : want) hit += top.count(c);
  return static_cast<double>(hit) / static_cast<double>(want.size());
}

inline double recall_at_top(std::span<const std::size_t> ranked, std::span<const std::size_t> correct) {
  if (correct.size() != 2 && correct.size() != 4) {
    throw ConfigError("recall_at_top: needs 2 or 4 correct entries, got " +
                      std::to_string(correct.size()));
  }
  return recall_at_k(ranked, correct, correct.size()) == 1.0 ? 1.0 : 0.0;
}

// ---- generation metrics ------------------------------------------------------
// Matching is on whitespace-delimited words so that a one-letter label is not
// found inside an unrelated word.

inline std::set<std::string> text_words(std::string_view text) {
  std::set<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.emplace(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double id_accuracy(std::string_view generated, std::span<const std::string> gold_labels) {
  const auto words = text_words(generated);
  for (const auto& l : gold_labels) {
    if (!words.count(l)) return 0.0;
  }
  return 1.0;
}

inline double exact_match(std::string_view generated, std::span<const std::string> gold_objects) {
  return id_accuracy(generated, gold_objects);
}

inline double exact_match(std::string_view generated, const std::string& gold_object) {
  return exact_match(generated, std::span<const std::string>(&gold_object, 1));
}

// Refusal present and no id label. With an empty label list any all-uppercase
// word other than the refusal counts as a label.
inline double refusal_accuracy(std::string_view generated,
                               std::span<const std::string> kb_labels = {}) {
  const auto words = text_words(generated);
  if (!words.count(std::string(kRefusal))) return 0.0;
  if (!kb_labels.empty()) {
    for (const auto& l : kb_labels) {
      if (words.count(l)) return 0.0;
    }
    return 1.0;
  }
  for (const auto& w : words) {
    if (w == kRefusal) continue;
    if (std::all_of(w.begin(), w.end(), [](char c) { return c >= 'A' && c <= 'Z'; })) return 0.0;
  }
  return 1.0;
}

// ---- memory model -------------------------------------------------------------

struct MemoryEstimate {
  std::string mode;
  std::size_t pool = 0;
  double peak_bytes = 0;             // pre-selection peak, KB + token KV across layers
  double steady_bytes = 0;           // after selection
  double post_retrieval_kb_bytes = 0;  // KB rows resident above the retrieval layer
};

// KV bytes held for KB rows and tokens. Without compression every layer keeps
// all M rows; with compression, selecting layers hold one scoring chunk while
// they stream the pool and later layers hold k rows.
inline MemoryEstimate memory_model(std::size_t m, std::size_t n, std::size_t d, std::size_t layers,
                                   const CompressionPolicy& policy, std::size_t chunk = 256,
                                   std::size_t bytes_per_value = 2) {
  if (m == 0 || n == 0 || d == 0 || layers == 0 || chunk == 0 || bytes_per_value == 0) {
    throw ConfigError("memory_model: dimensions must be positive");
  }
  policy.validate(layers);
  const double row = 2.0 * static_cast<double>(d * bytes_per_value);  // key + value
  const double dm = double(m), dn = double(n), dl = double(layers);
  MemoryEstimate e;
  e.mode = to_string(policy.mode);
  e.pool = m;
  const std::size_t kk = std::min(policy.k, m);
  if (policy.mode == CompressionMode::none || kk == m) {
    e.steady_bytes = dl * (dm + dn) * row;
    e.peak_bytes = e.steady_bytes;
    e.post_retrieval_kb_bytes = dl * dm * row;
    if (policy.mode != CompressionMode::none) {
      e.post_retrieval_kb_bytes = (dl - double(policy.retrieval_layer)) * dm * row;
    }
    return e;
  }
  const double c = double(std::min(chunk, m));
  const double r = policy.mode == CompressionMode::per_layer ? dl : double(policy.retrieval_layer);
  e.steady_bytes = r * (c + dn) * row + (dl - r) * (double(kk) + dn) * row;
  e.peak_bytes = e.steady_bytes + std::max(0.0, c - double(kk)) * row;
  e.post_retrieval_kb_bytes = (dl - double(policy.retrieval_layer)) * double(kk) * row;
  return e;
}

// ---- evaluation harness -------------------------------------------------------

struct EvalOptions {
  std::vector<std::size_t> kb_sizes{200};
  std::vector<CompressionPolicy> policies{CompressionPolicy{}};
  std::vector<std::uint64_t> seeds{0};
  std::size_t samples = 100;  // examples per (size, policy, seed)
  std::size_t max_new = 8;
  std::size_t score_chunk = 256;
  bool relabel = true;
};

struct MetricsRow {
  std::size_t kb_size = 0;
  std::string policy;
  std::string seed;  // a seed value, or "mean"
  std::string qa_type;
  std::size_t count = 0;
  double recall_at_100 = 0, recall_at_10 = 0, recall_at_top = 0;
  double id_accuracy = 0, exact_match = 0, refusal_accuracy = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<MemoryEstimate> memory;

  // First row matching; throws when absent.
  const MetricsRow& find(std::size_t kb_size, const std::string& policy, const std::string& qa_type,
                         const std::string& seed = "mean") const {
    for (const auto& r : rows) {
      if (r.kb_size == kb_size && r.policy == policy && r.qa_type == qa_type && r.seed == seed) return r;
    }
    throw ConfigError("MetricsReport: no row for size " + std::to_string(kb_size) + ", policy " +
                      policy + ", type " + qa_type + ", seed " + seed);
  }
};

struct ExampleOutcome {
  QaType type = QaType::single;
  double recall_at_100 = 0, recall_at_10 = 0, recall_at_top = 0;
  double id_accuracy = 0, exact_match = 0, refusal_accuracy = 0;
  std::string generated;
};

// Descending ranking of the whole pool by the retrieval layer's Ā.
inline IndexList retrieval_ranking(const RectAttnTrace& trace, std::size_t retrieval_layer) {
  const auto& scores = trace.layers.at(retrieval_layer).pool_abar;
  if (scores.empty()) throw ConfigError("retrieval layer did not score the full pool");
  return topk_indices(scores, scores.size());
}

// Scores one example whose indices already refer to `pool`.
inline ExampleOutcome evaluate_example(const Backbone& bb, const AdapterSet& ad, const Tokenizer& tok,
                                       const KbStore& pool, const QaExample& ex,
                                       const CompressionPolicy& policy, std::uint64_t seed,
                                       std::size_t max_new, std::size_t chunk) {
  const TokenizedExample te = tokenize_example(ex, tok);
  const DecodeResult r = decode(bb, ad, pool, tok, te.prompt, max_new, policy, seed, chunk);
  ExampleOutcome o;
  o.type = ex.qa_type;
  o.generated = r.text;
  std::vector<std::string> labels;
  for (const auto& e : pool.entries()) {
    if (e.id_label) labels.push_back(*e.id_label);
  }
  if (ex.qa_type == QaType::unanswerable) {
    o.refusal_accuracy = refusal_accuracy(r.text, labels);
    return o;
  }
  const IndexList ranked = retrieval_ranking(r.trace, policy.retrieval_layer);
  const auto correct = ex.correct_indices();
  o.recall_at_100 = recall_at_k(ranked, correct, 100);
  o.recall_at_10 = recall_at_k(ranked, correct, 10);
  o.recall_at_top = recall_at_top(ranked, correct);
  std::vector<std::string> gold_ids, gold_objects;
  for (std::size_t j = 0; j < ex.factual_indices.size(); ++j) {
    gold_objects.push_back(pool[ex.factual_indices[j]].triple.object);
    gold_ids.push_back(*pool[ex.reference_indices[j]].id_label);
  }
  o.id_accuracy = id_accuracy(r.text, gold_ids);
  o.exact_match = exact_match(r.text, gold_objects);
  return o;
}

namespace detail {

inline MetricsRow summarize(std::size_t size, const std::string& policy, const std::string& seed,
                            const std::string& type, const std::vector<const ExampleOutcome*>& xs) {
  MetricsRow row{size, policy, seed, type};
  row.count = xs.size();
  if (xs.empty()) return row;
  for (const auto* o : xs) {
    row.recall_at_100 += o->recall_at_100;
    row.recall_at_10 += o->recall_at_10;
    row.recall_at_top += o->recall_at_top;
    row.id_accuracy += o->id_accuracy;
    row.exact_match += o->exact_match;
    row.refusal_accuracy += o->refusal_accuracy;
  }
  const double n = static_cast<double>(xs.size());
  for (double* v : {&row.recall_at_100, &row.recall_at_10, &row.recall_at_top, &row.id_accuracy,
                    &row.exact_match, &row.refusal_accuracy}) {
    *v /= n;
  }
  return row;
}

inline std::vector<std::string> row_types() {
  return {"single", "multi_same", "multi_diff", "multi", "unanswerable"};
}

inline bool type_matches(const std::string& label, QaType t) {
  if (label == "multi") return t == QaType::multi_same || t == QaType::multi_diff;
  return label == to_string(t);
}

}  // namespace detail

// Evaluates every (kb size, policy, seed). Each example gets its own pool of the
// requested size (its correct entries plus seeded negatives) with fresh id labels.
// Rows are emitted per seed and averaged over seeds ("mean").
inline MetricsReport run_eval(const Backbone& bb, const AdapterSet& ad, const Tokenizer& tok,
                              const KbStore& universe, const std::vector<QaExample>& qa,
                              const EvalOptions& opt) {
  if (qa.empty()) throw ConfigError("run_eval: empty QA set");
  MetricsReport report;
  for (std::size_t size : opt.kb_sizes) {
    for (const auto& policy : opt.policies) {
      policy.validate(bb.config.layers);
      std::vector<std::vector<ExampleOutcome>> per_seed;
      for (std::uint64_t seed : opt.seeds) {
        Rng rng(derive_seed(derive_seed(seed, size), 0xE7A1));
        IndexList order(qa.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        order.resize(std::min(opt.samples, order.size()));
        std::vector<ExampleOutcome> outcomes;
        for (std::size_t i : order) {
          const QaExample& ex = qa[i];
          auto [pool, source] = make_pool(universe, ex.correct_indices(), size, rng, opt.relabel);
          const QaExample local = remap_example(ex, source, pool);
          outcomes.push_back(evaluate_example(bb, ad, tok, pool, local, policy,
                                              derive_seed(seed, i), opt.max_new, opt.score_chunk));
        }
        per_seed.push_back(std::move(outcomes));
      }
      const std::string pname = to_string(policy.mode);
      for (const auto& type : detail::row_types()) {
        std::vector<MetricsRow> seed_rows;
        for (std::size_t s = 0; s < opt.seeds.size(); ++s) {
          std::vector<const ExampleOutcome*> xs;
          for (const auto& o : per_seed[s]) {
            if (detail::type_matches(type, o.type)) xs.push_back(&o);
          }
          if (xs.empty()) continue;
          seed_rows.push_back(detail::summarize(size, pname, std::to_string(opt.seeds[s]), type, xs));
        }
        if (seed_rows.empty()) continue;
        MetricsRow mean{size, pname, "mean", type};
        for (const auto& r : seed_rows) {
          mean.count += r.count;
          mean.recall_at_100 += r.recall_at_100;
          mean.recall_at_10 += r.recall_at_10;
          mean.recall_at_top += r.recall_at_top;
          mean.id_accuracy += r.id_accuracy;
          mean.exact_match += r.exact_match;
          mean.refusal_accuracy += r.refusal_accuracy;
        }
        const double n = static_cast<double>(seed_rows.size());
        for (double* v : {&mean.recall_at_100, &mean.recall_at_10, &mean.recall_at_top,
                          &mean.id_accuracy, &mean.exact_match, &mean.refusal_accuracy}) {
          *v /= n;
        }
        for (auto& r : seed_rows) report.rows.push_back(std::move(r));
        report.rows.push_back(mean);
      }
      report.memory.push_back(memory_model(size, bb.config.max_seq, bb.config.width,
                                           bb.config.layers, policy, opt.score_chunk));
    }
  }
  return report;
}

// ---- serialization -------------------------------------------------------------

inline nlohmann::json to_json(const MemoryEstimate& e) {
  return {{"mode", e.mode},
          {"pool", e.pool},
          {"peak_bytes", e.peak_bytes},
          {"steady_bytes", e.steady_bytes},
          {"post_retrieval_kb_bytes", e.post_retrieval_kb_bytes}};
}

inline nlohmann::json to_json(const MetricsRow& r) {
  return {{"kb_size", r.kb_size},
          {"policy", r.policy},
          {"seed", r.seed},
          {"qa_type", r.qa_type},
          {"count", r.count},
          {"recall_at_100", r.recall_at_100},
          {"recall_at_10", r.recall_at_10},
          {"recall_at_top", r.recall_at_top},
          {"id_accuracy", r.id_accuracy},
          {"exact_match", r.exact_match},
          {"refusal_accuracy", r.refusal_accuracy}};
}

inline nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array(), mem = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back(to_json(r));
  for (const auto& m : report.memory) mem.push_back(to_json(m));
  return {{"rows", rows}, {"memory", mem}};
}

inline void write_metrics_csv(std::ostream& os, const MetricsReport& report) {
  os << "seed,kb_size,policy,qa_type,count,recall_at_100,recall_at_10,recall_at_top,id_accuracy,"
        "exact_match,refusal_accuracy\n";
  for (const auto& r : report.rows) {
    os << r.seed << ',' << r.kb_size << ',' << r.policy << ',' << r.qa_type << ',' << r.count;
    for (double v : {r.recall_at_100, r.recall_at_10, r.recall_at_top, r.id_accuracy,
                     r.exact_match, r.refusal_accuracy}) {
      os << ',' << std::setprecision(17) << v;
    }
    os << '\n';
  }
}

}  // namespace srki
