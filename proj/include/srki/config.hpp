#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "srki/datagen.hpp"
#include "srki/errors.hpp"
#include "srki/eval.hpp"
#include "srki/retrieval.hpp"
#include "srki/training.hpp"

namespace srki {

struct DataSpec {
  VocabSpec vocab;
  std::size_t triples = 3000;     // KB universe
  std::size_t qa_triples = 2000;  // the first qa_triples are asked about; the rest are distractors
  QaCounts train{1200, 400, 400, 400};
  QaCounts test{100, 50, 50, 50};
  std::size_t id_length = 1;
  std::uint64_t encoder_seed = 0x5EED;
};

struct IdentifySpec {
  std::size_t probe_size = 40;
  std::size_t num_negatives = 20;
};

struct EvalSpec {
  std::vector<std::size_t> kb_sizes{200, 1000};
  std::vector<std::string> policies{"none", "reuse"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t samples = 100;
  std::size_t max_new = 8;
  std::size_t score_chunk = 256;
};

struct BenchSpec {
  std::vector<std::size_t> kb_sizes{1000, 5000, 10000, 20000, 40000};
  std::size_t tokens = 32;
  std::size_t bytes_per_value = 2;
};

struct AblateSpec {
  std::size_t kb_size = 1000;
  std::vector<std::string> policies{"reuse", "per_layer", "random_pre_retrieval"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;  // vocab is derived from the data spec
  DataSpec data;
  PretrainConfig pretrain;
  TrainConfig stage1;
  TrainConfig stage2;
  IdentifySpec identify;
  CompressionPolicy policy;  // retrieval_layer < 0 in JSON means "from identify-layer"
  bool retrieval_layer_auto = true;
  EvalSpec eval;
  BenchSpec bench;
  AblateSpec ablate;

  void validate() const;
};

namespace cfgio {

// Reads an object's members strictly: unknown keys are validation errors.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  Reader child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(path_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_counts(Reader r, QaCounts& c) {
  r.get("single", c.single);
  r.get("multi_same", c.multi_same);
  r.get("multi_diff", c.multi_diff);
  r.get("unanswerable", c.unanswerable);
  r.finish();
}

inline void read_train(Reader r, TrainConfig& t) {
  r.get("learning_rate", t.learning_rate);
  r.get("warmup_ratio", t.warmup_ratio);
  r.get("weight_decay", t.weight_decay);
  r.get("batch_size", t.batch_size);
  r.get("steps", t.steps);
  r.get("temperature", t.temperature);
  r.get("k_train", t.k_train);
  r.get("m_train", t.m_train);
  Reader m = r.child("mix");
  m.get("single", t.mix.single);
  m.get("multi", t.mix.multi);
  m.get("unanswerable", t.mix.unanswerable);
  m.finish();
  r.finish();
}

inline nlohmann::json write_train(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"warmup_ratio", t.warmup_ratio},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"temperature", t.temperature},
          {"k_train", t.k_train},
          {"m_train", t.m_train},
          {"mix", {{"single", t.mix.single}, {"multi", t.mix.multi}, {"unanswerable", t.mix.unanswerable}}}};
}

inline nlohmann::json write_counts(const QaCounts& c) {
  return {{"single", c.single},
          {"multi_same", c.multi_same},
          {"multi_diff", c.multi_diff},
          {"unanswerable", c.unanswerable}};
}

}  // namespace cfgio

// Replaces the run seed and every seed derived from it.
inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.data.vocab.seed = seed;
  c.pretrain.seed = derive_seed(seed, 0x50);
  c.stage1.seed = derive_seed(seed, 0x51);
  c.stage2.seed = derive_seed(seed, 0x52);
}

// Missing keys keep their defaults; stage seeds derive from the run seed.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  cfgio::Reader root(j, "config");
  root.get("seed", c.seed);
  {
    auto m = root.child("model");
    m.get("layers", c.model.layers);
    m.get("width", c.model.width);
    m.get("heads", c.model.heads);
    m.get("encoder_dim", c.model.encoder_dim);
    m.get("max_seq", c.model.max_seq);
    m.get("ffn_mult", c.model.ffn_mult);
    m.finish();
  }
  {
    auto d = root.child("data");
    d.get("subjects", c.data.vocab.subjects);
    d.get("relations", c.data.vocab.relations);
    d.get("objects", c.data.vocab.objects);
    d.get("aliases", c.data.vocab.aliases);
    d.get("triples", c.data.triples);
    d.get("qa_triples", c.data.qa_triples);
    d.get("id_length", c.data.id_length);
    d.get("encoder_seed", c.data.encoder_seed);
    cfgio::read_counts(d.child("train_counts"), c.data.train);
    cfgio::read_counts(d.child("test_counts"), c.data.test);
    d.finish();
  }
  {
    auto p = root.child("pretrain");
    p.get("learning_rate", c.pretrain.learning_rate);
    p.get("warmup_ratio", c.pretrain.warmup_ratio);
    p.get("weight_decay", c.pretrain.weight_decay);
    p.get("batch_size", c.pretrain.batch_size);
    p.get("steps", c.pretrain.steps);
    p.get("lexical_init", c.pretrain.lexical_init);
    p.finish();
  }
  cfgio::read_train(root.child("stage1"), c.stage1);
  cfgio::read_train(root.child("stage2"), c.stage2);
  {
    auto i = root.child("identify");
    i.get("probe_size", c.identify.probe_size);
    i.get("num_negatives", c.identify.num_negatives);
    i.finish();
  }
  {
    auto p = root.child("policy");
    std::string mode = to_string(c.policy.mode);
    long long layer = -1;
    p.get("mode", mode);
    p.get("k", c.policy.k);
    p.get("retrieval_layer", layer);
    p.get("maxpool_kernel", c.policy.maxpool_kernel);
    p.finish();
    c.policy.mode = compression_mode_from_string(mode);
    c.retrieval_layer_auto = layer < 0;
    c.policy.retrieval_layer = layer < 0 ? 0 : static_cast<std::size_t>(layer);
  }
  {
    auto e = root.child("eval");
    e.get("kb_sizes", c.eval.kb_sizes);
    e.get("policies", c.eval.policies);
    e.get("seeds", c.eval.seeds);
    e.get("samples", c.eval.samples);
    e.get("max_new", c.eval.max_new);
    e.get("score_chunk", c.eval.score_chunk);
    e.finish();
  }
  {
    auto b = root.child("bench");
    b.get("kb_sizes", c.bench.kb_sizes);
    b.get("tokens", c.bench.tokens);
    b.get("bytes_per_value", c.bench.bytes_per_value);
    b.finish();
  }
  {
    auto a = root.child("ablate");
    a.get("kb_size", c.ablate.kb_size);
    a.get("policies", c.ablate.policies);
    a.get("seeds", c.ablate.seeds);
    a.finish();
  }
  root.finish();
  apply_seed(c, c.seed);
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"model",
       {{"layers", c.model.layers},
        {"width", c.model.width},
        {"heads", c.model.heads},
        {"encoder_dim", c.model.encoder_dim},
        {"max_seq", c.model.max_seq},
        {"ffn_mult", c.model.ffn_mult}}},
      {"data",
       {{"subjects", c.data.vocab.subjects},
        {"relations", c.data.vocab.relations},
        {"objects", c.data.vocab.objects},
        {"aliases", c.data.vocab.aliases},
        {"triples", c.data.triples},
        {"qa_triples", c.data.qa_triples},
        {"id_length", c.data.id_length},
        {"encoder_seed", c.data.encoder_seed},
        {"train_counts", cfgio::write_counts(c.data.train)},
        {"test_counts", cfgio::write_counts(c.data.test)}}},
      {"pretrain",
       {{"learning_rate", c.pretrain.learning_rate},
        {"warmup_ratio", c.pretrain.warmup_ratio},
        {"weight_decay", c.pretrain.weight_decay},
        {"batch_size", c.pretrain.batch_size},
        {"steps", c.pretrain.steps},
        {"lexical_init", c.pretrain.lexical_init}}},
      {"stage1", cfgio::write_train(c.stage1)},
      {"stage2", cfgio::write_train(c.stage2)},
      {"identify", {{"probe_size", c.identify.probe_size}, {"num_negatives", c.identify.num_negatives}}},
      {"policy",
       {{"mode", to_string(c.policy.mode)},
        {"k", c.policy.k},
        {"retrieval_layer", c.retrieval_layer_auto ? -1 : static_cast<long long>(c.policy.retrieval_layer)},
        {"maxpool_kernel", c.policy.maxpool_kernel}}},
      {"eval",
       {{"kb_sizes", c.eval.kb_sizes},
        {"policies", c.eval.policies},
        {"seeds", c.eval.seeds},
        {"samples", c.eval.samples},
        {"max_new", c.eval.max_new},
        {"score_chunk", c.eval.score_chunk}}},
      {"bench",
       {{"kb_sizes", c.bench.kb_sizes},
        {"tokens", c.bench.tokens},
        {"bytes_per_value", c.bench.bytes_per_value}}},
      {"ablate", {{"kb_size", c.ablate.kb_size}, {"policies", c.ablate.policies}, {"seeds", c.ablate.seeds}}}};
}

inline void RunConfig::validate() const {
  ModelConfig m = model;
  m.vocab = 1;
  m.validate();
  data.vocab.validate();
  if (data.qa_triples < 1 || data.qa_triples > data.triples) {
    throw ConfigError("config.data: need 1 <= qa_triples <= triples");
  }
  if (data.triples > data.vocab.subjects * data.vocab.relations) {
    throw ConfigError("config.data: " + std::to_string(data.triples) +
                      " triples exceed the distinct (subject, relation) capacity " +
                      std::to_string(data.vocab.subjects * data.vocab.relations));
  }
  if (data.id_length < 1) throw ConfigError("config.data.id_length must be >= 1");
  if (data.train.total() == 0 || data.test.total() == 0) {
    throw ConfigError("config.data: train and test counts must be nonzero");
  }
  stage1.validate();
  stage2.validate();
  for (const TrainConfig* t : {&stage1, &stage2}) {
    if (t->m_train > 2 * data.triples) throw ConfigError("config: m_train exceeds the KB universe");
  }
  if (pretrain.batch_size < 1) throw ConfigError("config.pretrain.batch_size must be >= 1");
  if (pretrain.lexical_init && model.encoder_dim > model.width) {
    throw ConfigError("config.pretrain.lexical_init needs encoder_dim <= width");
  }
  if (identify.probe_size < 1) throw ConfigError("config.identify.probe_size must be >= 1");
  CompressionPolicy p = policy;
  if (retrieval_layer_auto) p.retrieval_layer = 0;
  p.validate(model.layers);
  for (const auto& name : eval.policies) compression_mode_from_string(name);
  for (const auto& name : ablate.policies) compression_mode_from_string(name);
  for (std::size_t s : eval.kb_sizes) {
    if (s < 4 || s > 2 * data.triples) {
      throw ConfigError("config.eval: kb size " + std::to_string(s) + " outside [4, " +
                        std::to_string(2 * data.triples) + "]");
    }
  }
  if (ablate.kb_size < 4 || ablate.kb_size > 2 * data.triples) {
    throw ConfigError("config.ablate.kb_size outside the KB universe");
  }
  if (eval.seeds.empty() || ablate.seeds.empty()) throw ConfigError("config: seed lists must be nonempty");
  if (eval.samples < 1 || eval.max_new < 1 || eval.score_chunk < 1) {
    throw ConfigError("config.eval: samples, max_new and score_chunk must be >= 1");
  }
  for (std::size_t s : bench.kb_sizes) {
    if (s == 0) throw ConfigError("config.bench: kb sizes must be positive");
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  RunConfig c = config_from_json(j);
  return c;
}

}  // namespace srki
