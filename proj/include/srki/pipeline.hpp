#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "srki/checkpoint.hpp"
#include "srki/config.hpp"
#include "srki/datagen.hpp"
#include "srki/eval.hpp"
#include "srki/training.hpp"

namespace srki {

namespace fs = std::filesystem;

// File names inside the output directory.
namespace artifact {
inline constexpr const char* kTriples = "triples.jsonl";
inline constexpr const char* kKb = "kb.jsonl";
inline constexpr const char* kQa = "qa.jsonl";
inline constexpr const char* kBackbone = "backbone.bin";
inline constexpr const char* kStage0Loss = "stage0_loss.csv";
inline constexpr const char* kStage1 = "stage1.ckpt";
inline constexpr const char* kStage1Loss = "stage1_loss.csv";
inline constexpr const char* kLayerScores = "layer_scores.json";
inline constexpr const char* kStage2 = "stage2.ckpt";
inline constexpr const char* kStage2Loss = "stage2_loss.csv";
inline constexpr const char* kMetricsJson = "metrics.json";
inline constexpr const char* kMetricsCsv = "metrics.csv";
inline constexpr const char* kMemoryJson = "memory.json";
inline constexpr const char* kMemoryCsv = "memory.csv";
inline constexpr const char* kAblationJson = "ablation.json";
inline constexpr const char* kAblationCsv = "ablation.csv";
}  // namespace artifact

inline KbOptions kb_options(const RunConfig& c) {
  return KbOptions{c.model.encoder_dim, c.data.encoder_seed, c.data.id_length};
}

inline ModelConfig model_config(const RunConfig& c, const Tokenizer& tok) {
  ModelConfig m = c.model;
  m.vocab = tok.size();
  return m;
}

// Everything the data step produces, regenerated in memory.
struct Corpus {
  std::vector<Triple> triples;
  KbStore universe;
  QaSplit qa;
  Tokenizer tokenizer;
};

inline Corpus generate_corpus(const RunConfig& c) {
  Corpus out;
  out.triples = generate_triples(c.data.triples, c.data.vocab);
  out.universe = build_kb(out.triples, true, c.seed, kb_options(c));
  out.qa = generate_qa_split(out.triples, out.universe, c.data.qa_triples, c.data.train, c.data.test,
                             c.seed, c.data.vocab);
  out.tokenizer = make_tokenizer(c.data.vocab);
  return out;
}

namespace detail {

template <typename F>
inline void write_file(const fs::path& p, F&& body) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + p.string() + "'");
  body(os);
  if (!os) throw FormatError("write failed for '" + p.string() + "'");
}

inline std::ifstream open_input(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError("missing artifact '" + p.string() + "' (run the earlier pipeline step)");
  return is;
}

}  // namespace detail

inline Corpus load_corpus(const RunConfig& c, const fs::path& out) {
  Corpus corpus;
  {
    auto is = detail::open_input(out / artifact::kTriples);
    corpus.triples = read_triples_jsonl(is);
  }
  {
    auto is = detail::open_input(out / artifact::kKb);
    corpus.universe = read_kb_jsonl(is, kb_options(c));
  }
  {
    auto is = detail::open_input(out / artifact::kQa);
    corpus.qa = read_qa_jsonl(is);
  }
  corpus.tokenizer = make_tokenizer(c.data.vocab);
  return corpus;
}

inline void log_line(const std::string& s) { std::cerr << s << std::endl; }

// ---- subcommands ----------------------------------------------------------------

inline void cmd_gen_data(const RunConfig& c, const fs::path& out) {
  const Corpus corpus = generate_corpus(c);
  fs::create_directories(out);
  detail::write_file(out / artifact::kTriples, [&](std::ostream& os) { write_triples_jsonl(os, corpus.triples); });
  detail::write_file(out / artifact::kKb, [&](std::ostream& os) { write_kb_jsonl(os, corpus.universe); });
  detail::write_file(out / artifact::kQa, [&](std::ostream& os) {
    write_qa_jsonl(os, corpus.qa.train, "train");
    write_qa_jsonl(os, corpus.qa.test, "test");
  });
  for (const auto& w : corpus.universe.warnings()) log_line("warning: " + w);
  log_line("gen-data: " + std::to_string(corpus.triples.size()) + " triples, " +
           std::to_string(corpus.universe.size()) + " KB entries, " +
           std::to_string(corpus.qa.train.size()) + " train / " +
           std::to_string(corpus.qa.test.size()) + " test QA");
}

// Stage 0 (optional backbone pretraining) followed by stage-1 adapter training.
inline void cmd_train_stage1(const RunConfig& c, const fs::path& out) {
  const Corpus corpus = load_corpus(c, out);
  Backbone bb = Backbone::random(model_config(c, corpus.tokenizer), derive_seed(c.seed, 0xB0));
  if (c.pretrain.lexical_init) seed_lexical_embeddings(bb, corpus.tokenizer, c.data.encoder_seed);
  if (c.pretrain.steps > 0) {
    const auto r = pretrain_backbone(bb, corpus.tokenizer, corpus.qa.train, c.data.vocab,
                                     c.data.id_length, c.pretrain);
    detail::write_file(out / artifact::kStage0Loss, [&](std::ostream& os) { write_loss_csv(os, r.curve); });
    log_line("stage0: loss " + std::to_string(r.curve.front().l_lm) + " -> " +
             std::to_string(r.curve.back().l_lm));
  }
  save_backbone((out / artifact::kBackbone).string(), bb);
  AdapterSet ad = init_adapters(bb, derive_seed(c.seed, 0xAD));
  const auto r = stage1_train(bb, ad, corpus.tokenizer, corpus.qa.train, corpus.universe, c.stage1);
  detail::write_file(out / artifact::kStage1Loss, [&](std::ostream& os) { write_loss_csv(os, r.curve); });
  save_checkpoint((out / artifact::kStage1).string(), ad, bb.config);
  if (!r.curve.empty()) {
    log_line("stage1: l_lm " + std::to_string(r.curve.front().l_lm) + " -> " +
             std::to_string(r.curve.back().l_lm));
  }
}

inline std::vector<QaExample> probe_set(const std::vector<QaExample>& train, std::size_t n) {
  std::vector<QaExample> out;
  for (const auto& ex : train) {
    if (out.size() == n) break;
    if (ex.qa_type == QaType::single) out.push_back(ex);
  }
  return out;
}

inline LayerIdentification run_identify(const RunConfig& c, const Backbone& bb, const AdapterSet& ad,
                                        const Corpus& corpus) {
  return identify_retrieval_layer(bb, ad, corpus.tokenizer, probe_set(corpus.qa.train, c.identify.probe_size),
                                  corpus.universe, c.identify.num_negatives, derive_seed(c.seed, 0x1D),
                                  c.eval.max_new);
}

inline void cmd_identify_layer(const RunConfig& c, const fs::path& out) {
  const Corpus corpus = load_corpus(c, out);
  const Backbone bb = load_backbone((out / artifact::kBackbone).string());
  const AdapterSet ad = load_checkpoint((out / artifact::kStage1).string(), bb.config);
  const LayerIdentification li = run_identify(c, bb, ad, corpus);
  detail::write_file(out / artifact::kLayerScores, [&](std::ostream& os) { os << to_json(li).dump(2) << '\n'; });
  for (const auto& s : li.table) {
    log_line("layer " + std::to_string(s.layer) + ": id_accuracy " + std::to_string(s.id_accuracy) +
             ", exact_match " + std::to_string(s.exact_match));
  }
  log_line("identify-layer: retrieval layer " + std::to_string(li.layer));
}

inline std::size_t resolve_retrieval_layer(const RunConfig& c, const fs::path& out) {
  if (!c.retrieval_layer_auto) return c.policy.retrieval_layer;
  auto is = detail::open_input(out / artifact::kLayerScores);
  try {
    const auto j = nlohmann::json::parse(is);
    const auto layer = j.at("retrieval_layer").get<std::size_t>();
    if (layer >= c.model.layers) throw FormatError("layer_scores.json: retrieval layer out of range");
    return layer;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("layer_scores.json: ") + e.what());
  }
}

inline void cmd_train_stage2(const RunConfig& c, const fs::path& out) {
  const Corpus corpus = load_corpus(c, out);
  const Backbone bb = load_backbone((out / artifact::kBackbone).string());
  AdapterSet ad = load_checkpoint((out / artifact::kStage1).string(), bb.config);
  const std::size_t layer = resolve_retrieval_layer(c, out);
  const auto r = stage2_train(bb, ad, layer, corpus.tokenizer, corpus.qa.train, corpus.universe, c.stage2);
  detail::write_file(out / artifact::kStage2Loss, [&](std::ostream& os) { write_loss_csv(os, r.curve); });
  save_checkpoint((out / artifact::kStage2).string(), ad, bb.config);
  if (!r.curve.empty()) {
    log_line("stage2: l_lm " + std::to_string(r.curve.front().l_lm) + " -> " +
             std::to_string(r.curve.back().l_lm) + ", l_a " + std::to_string(r.curve.front().l_a) +
             " -> " + std::to_string(r.curve.back().l_a));
  }
}

inline std::vector<CompressionPolicy> policies_named(const RunConfig& c, const std::vector<std::string>& names,
                                                     std::size_t retrieval_layer) {
  std::vector<CompressionPolicy> out;
  for (const auto& n : names) {
    CompressionPolicy p = c.policy;
    p.mode = compression_mode_from_string(n);
    p.retrieval_layer = retrieval_layer;
    out.push_back(p);
  }
  return out;
}

inline void write_report(const fs::path& json_path, const fs::path& csv_path, const MetricsReport& r) {
  detail::write_file(json_path, [&](std::ostream& os) { os << to_json(r).dump(2) << '\n'; });
  detail::write_file(csv_path, [&](std::ostream& os) { write_metrics_csv(os, r); });
}

// Evaluates the stage-2 checkpoint unless another checkpoint is named.
inline MetricsReport cmd_eval(const RunConfig& c, const fs::path& out,
                              const std::optional<fs::path>& checkpoint = std::nullopt) {
  const Corpus corpus = load_corpus(c, out);
  const Backbone bb = load_backbone((out / artifact::kBackbone).string());
  const AdapterSet ad =
      load_checkpoint((checkpoint ? *checkpoint : out / artifact::kStage2).string(), bb.config);
  const std::size_t layer = resolve_retrieval_layer(c, out);
  EvalOptions eo;
  eo.kb_sizes = c.eval.kb_sizes;
  eo.policies = policies_named(c, c.eval.policies, layer);
  eo.seeds = c.eval.seeds;
  eo.samples = c.eval.samples;
  eo.max_new = c.eval.max_new;
  eo.score_chunk = c.eval.score_chunk;
  const MetricsReport report = run_eval(bb, ad, corpus.tokenizer, corpus.universe, corpus.qa.test, eo);
  write_report(out / artifact::kMetricsJson, out / artifact::kMetricsCsv, report);
  for (const auto& r : report.rows) {
    if (r.seed != "mean") continue;
    log_line("eval M=" + std::to_string(r.kb_size) + " " + r.policy + " " + r.qa_type +
             ": recall@top " + std::to_string(r.recall_at_top) + ", recall@10 " +
             std::to_string(r.recall_at_10) + ", id " + std::to_string(r.id_accuracy) + ", em " +
             std::to_string(r.exact_match) + ", refusal " + std::to_string(r.refusal_accuracy));
  }
  return report;
}

inline std::vector<MemoryEstimate> memory_sweep(const RunConfig& c, std::size_t retrieval_layer) {
  std::vector<MemoryEstimate> out;
  for (std::size_t m : c.bench.kb_sizes) {
    for (auto mode : {CompressionMode::none, CompressionMode::per_layer, CompressionMode::reuse}) {
      CompressionPolicy p = c.policy;
      p.mode = mode;
      p.retrieval_layer = retrieval_layer;
      out.push_back(memory_model(m, c.bench.tokens, c.model.width, c.model.layers, p,
                                 c.eval.score_chunk, c.bench.bytes_per_value));
    }
  }
  return out;
}

// Analytic only; uses the configured retrieval layer (0 when it is "auto" and
// identify-layer has not run).
inline std::vector<MemoryEstimate> cmd_bench_memory(const RunConfig& c, const fs::path& out) {
  std::size_t layer = c.policy.retrieval_layer;
  if (c.retrieval_layer_auto && fs::exists(out / artifact::kLayerScores)) layer = resolve_retrieval_layer(c, out);
  const auto sweep = memory_sweep(c, layer);
  fs::create_directories(out);
  detail::write_file(out / artifact::kMemoryJson, [&](std::ostream& os) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : sweep) arr.push_back(to_json(e));
    os << arr.dump(2) << '\n';
  });
  detail::write_file(out / artifact::kMemoryCsv, [&](std::ostream& os) {
    os << "mode,pool,peak_bytes,steady_bytes,post_retrieval_kb_bytes\n";
    for (const auto& e : sweep) {
      os << e.mode << ',' << e.pool << ',' << std::setprecision(17) << e.peak_bytes << ','
         << e.steady_bytes << ',' << e.post_retrieval_kb_bytes << '\n';
    }
  });
  log_line("bench-memory: " + std::to_string(sweep.size()) + " estimates");
  return sweep;
}

inline MetricsReport cmd_ablate(const RunConfig& c, const fs::path& out) {
  const Corpus corpus = load_corpus(c, out);
  const Backbone bb = load_backbone((out / artifact::kBackbone).string());
  const AdapterSet ad = load_checkpoint((out / artifact::kStage2).string(), bb.config);
  const std::size_t layer = resolve_retrieval_layer(c, out);
  EvalOptions eo;
  eo.kb_sizes = {c.ablate.kb_size};
  eo.policies = policies_named(c, c.ablate.policies, layer);
  eo.seeds = c.ablate.seeds;
  eo.samples = c.eval.samples;
  eo.max_new = c.eval.max_new;
  eo.score_chunk = c.eval.score_chunk;
  const MetricsReport report = run_eval(bb, ad, corpus.tokenizer, corpus.universe, corpus.qa.test, eo);
  write_report(out / artifact::kAblationJson, out / artifact::kAblationCsv, report);
  for (const auto& r : report.rows) {
    if (r.seed != "mean" || r.qa_type == "unanswerable") continue;
    log_line("ablate " + r.policy + " " + r.qa_type + ": id " + std::to_string(r.id_accuracy) +
             ", em " + std::to_string(r.exact_match) + ", recall@top " + std::to_string(r.recall_at_top));
  }
  return report;
}

}  // namespace srki
