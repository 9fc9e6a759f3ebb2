#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "srki/checkpoint.hpp"
#include "srki/config.hpp"
#include "srki/training.hpp"
#include "toy_corpus.hpp"

namespace fs = std::filesystem;

namespace srki {
namespace {

using testing::make_toy_corpus;

AdapterSet toy_adapters(const ModelConfig& cfg) {
  return init_adapters(Backbone::random(cfg, 1), 2);
}

TEST(Checkpoint, RoundTripIsFloat32Exact) {
  const auto c = make_toy_corpus();
  const AdapterSet a = toy_adapters(c.model);
  std::stringstream s;
  save_checkpoint(s, a, c.model);
  const AdapterSet b = load_checkpoint(s, c.model);
  ASSERT_EQ(b.layers.size(), a.layers.size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (auto [x, y] : {std::pair{&a.layers[l].query, &b.layers[l].query},
                        std::pair{&a.layers[l].key, &b.layers[l].key},
                        std::pair{&a.layers[l].value, &b.layers[l].value}}) {
      ASSERT_EQ(x->shape(), y->shape());
      for (std::size_t i = 0; i < x->size(); ++i) {
        EXPECT_EQ(static_cast<double>(static_cast<float>(x->data()[i])), y->data()[i]);
      }
    }
  }
  // A second round trip is bitwise stable.
  std::stringstream s2, s3;
  save_checkpoint(s2, b, c.model);
  save_checkpoint(s3, load_checkpoint(s2, c.model), c.model);
  std::stringstream s4;
  save_checkpoint(s4, b, c.model);
  EXPECT_EQ(s3.str(), s4.str());
}

TEST(Checkpoint, TruncatedFileRejected) {
  const auto c = make_toy_corpus();
  std::stringstream s;
  save_checkpoint(s, toy_adapters(c.model), c.model);
  const std::string bytes = s.str();
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream t(bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(t, c.model), FormatError) << cut;
  }
  std::stringstream extra(bytes + "x");
  EXPECT_THROW(load_checkpoint(extra, c.model), FormatError);
}

TEST(Checkpoint, HeaderValidation) {
  const auto c = make_toy_corpus();
  std::stringstream s;
  save_checkpoint(s, toy_adapters(c.model), c.model);
  std::string bytes = s.str();

  ModelConfig other = c.model;
  other.layers = 3;
  std::stringstream wrong_l(bytes);
  try {
    load_checkpoint(wrong_l, other);
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('L'), std::string::npos);
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find('2'), std::string::npos);
  }

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream m(bad_magic);
  EXPECT_THROW(load_checkpoint(m), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  std::stringstream v(bad_version);
  EXPECT_THROW(load_checkpoint(v), FormatError);
}

TEST(Checkpoint, BackboneRoundTripIsExact) {
  const auto c = make_toy_corpus();
  Backbone a = Backbone::random(c.model, 4);
  std::stringstream s;
  save_backbone(s, a);
  Backbone b = load_backbone(s);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
}

TEST(Config, DefaultsValidateAndRoundTrip) {
  const RunConfig c = config_from_json(nlohmann::json::object());
  EXPECT_NO_THROW(c.validate());
  const RunConfig d = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(d), config_to_json(c));
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(config_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"model", {{"layer", 2}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"policy", {{"mode", "sometimes"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"model", {{"width", "wide"}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"model", {{"width", 30}, {"heads", 4}}}}).validate(), ConfigError);
  EXPECT_THROW(config_from_json({{"stage2", {{"temperature", 0.0}}}}).validate(), ConfigError);
  EXPECT_THROW(config_from_json({{"data", {{"subjects", 10}, {"relations", 10}, {"triples", 101}}}}).validate(),
               ConfigError);
  EXPECT_THROW(config_from_json({{"policy", {{"retrieval_layer", 9}}}}).validate(), ConfigError);
}

TEST(Config, SeedOverrideReachesStages) {
  RunConfig c = config_from_json({{"seed", 3}});
  const auto before = config_to_json(c);
  apply_seed(c, 4);
  EXPECT_EQ(c.data.vocab.seed, 4u);
  EXPECT_NE(config_to_json(c), before);
  apply_seed(c, 3);
  EXPECT_EQ(config_to_json(c), before);
  EXPECT_NE(c.stage1.seed, c.stage2.seed);
}

// ---- the command-line driver ----------------------------------------------------

nlohmann::json tiny_config() {
  return {
      {"seed", 11},
      {"model", {{"layers", 2}, {"width", 16}, {"heads", 2}, {"encoder_dim", 8}, {"max_seq", 32}, {"ffn_mult", 2}}},
      {"data",
       {{"subjects", 20},
        {"relations", 6},
        {"objects", 8},
        {"triples", 80},
        {"qa_triples", 60},
        {"train_counts", {{"single", 30}, {"multi_same", 10}, {"multi_diff", 10}, {"unanswerable", 10}}},
        {"test_counts", {{"single", 6}, {"multi_same", 3}, {"multi_diff", 3}, {"unanswerable", 3}}}}},
      {"pretrain", {{"steps", 4}, {"batch_size", 2}}},
      {"stage1", {{"steps", 4}, {"batch_size", 2}, {"m_train", 20}, {"k_train", 5}, {"learning_rate", 1e-3}}},
      {"stage2", {{"steps", 4}, {"batch_size", 2}, {"m_train", 20}, {"k_train", 5}, {"learning_rate", 1e-3}}},
      {"identify", {{"probe_size", 4}, {"num_negatives", 6}}},
      {"policy", {{"mode", "reuse"}, {"k", 6}}},
      {"eval", {{"kb_sizes", {20}}, {"policies", {"none", "reuse"}}, {"seeds", {0, 1}}, {"samples", 6}, {"max_new", 4}}},
      {"bench", {{"kb_sizes", {100, 1000, 10000}}}},
      {"ablate", {{"kb_size", 20}, {"policies", {"reuse", "per_layer", "random_pre_retrieval"}}, {"seeds", {0}}}}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("srki_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_config(tiny_config());
  }
  void TearDown() override { fs::remove_all(dir); }

  void write_config(const nlohmann::json& j, const std::string& name = "cfg.json") {
    std::ofstream(dir / name) << j.dump(2);
  }

  int run(const std::string& args, const std::string& out = "out", const std::string& cfg = "cfg.json") {
    const std::string cmd = std::string(SRKI_CLI_PATH) + " --config " + (dir / cfg).string() + " --out " +
                            (dir / out).string() + " " + args + " 2>>" + (dir / "stderr.log").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  fs::path dir;
};

TEST_F(CliTest, InvalidConfigExitsOne) {
  auto bad = tiny_config();
  bad["model"]["depth"] = 3;
  write_config(bad, "bad.json");
  EXPECT_EQ(run("gen-data", "out", "bad.json"), 1);
  bad = tiny_config();
  bad["data"]["triples"] = 1000;
  write_config(bad, "bad.json");
  EXPECT_EQ(run("gen-data", "out", "bad.json"), 1);
  EXPECT_EQ(run("gen-data", "out", "missing.json"), 1);
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_NE(slurp(dir / "stderr.log").find("invalid configuration"), std::string::npos);
}

TEST_F(CliTest, MissingArtifactsExitTwo) {
  EXPECT_EQ(run("train-stage2"), 2);
  EXPECT_EQ(run("eval"), 2);
}

TEST_F(CliTest, GenDataIsReproducible) {
  ASSERT_EQ(run("gen-data", "a"), 0);
  ASSERT_EQ(run("gen-data", "b"), 0);
  for (const char* f : {"triples.jsonl", "kb.jsonl", "qa.jsonl"}) {
    EXPECT_FALSE(slurp(dir / "a" / f).empty());
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  ASSERT_EQ(run("--seed 12 gen-data", "c"), 0);
  EXPECT_NE(slurp(dir / "a" / "kb.jsonl"), slurp(dir / "c" / "kb.jsonl"));
}

TEST_F(CliTest, FullPipelineTwice) {
  for (const char* out : {"a", "b"}) {
    ASSERT_EQ(run("gen-data", out), 0);
    ASSERT_EQ(run("train-stage1", out), 0);
    ASSERT_EQ(run("identify-layer", out), 0);
    ASSERT_EQ(run("train-stage2", out), 0);
    ASSERT_EQ(run("eval", out), 0);
    ASSERT_EQ(run("bench-memory", out), 0);
    ASSERT_EQ(run("ablate", out), 0);
  }
  const auto layers = nlohmann::json::parse(slurp(dir / "a" / "layer_scores.json"));
  EXPECT_EQ(layers.at("layers").size(), 2u);
  for (const char* f : {"stage1.ckpt", "stage2.ckpt", "layer_scores.json", "metrics.json", "metrics.csv",
                        "memory.json", "memory.csv", "ablation.json", "ablation.csv", "stage2_loss.csv"}) {
    EXPECT_FALSE(slurp(dir / "a" / f).empty()) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_EQ(run("eval --checkpoint " + (dir / "a" / "stage1.ckpt").string(), "a"), 0);
  const auto memory = nlohmann::json::parse(slurp(dir / "a" / "memory.json"));
  EXPECT_FALSE(memory.empty());
}

}  // namespace
}  // namespace srki
