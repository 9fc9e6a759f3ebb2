#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "srki/attention.hpp"
#include "srki/model.hpp"

namespace srki {
namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

// Reference multi-head attention written with scalar loops: KB block first,
// then causally visible tokens, one softmax per row.
Tensor naive_attention(const Tensor& q, const Tensor& qt, const Tensor& k, const Tensor& v,
                       const Tensor& kk, const Tensor& kv, std::size_t heads) {
  const std::size_t n = q.rows(), d = q.cols(), dh = d / heads, m = kk.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits;
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += qt(i, c) * kk(j, c);
        logits.push_back(s * scale);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q(i, c) * k(j, c);
        logits.push_back(s * scale);
      }
      double mx = -std::numeric_limits<double>::infinity(), z = 0;
      for (double x : logits) mx = std::max(mx, x);
      for (double& x : logits) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < logits.size(); ++j) {
        const double p = logits[j] / z;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
          out(i, c) += p * (j < m ? kv(j, c) : v(j - m, c));
        }
      }
    }
  }
  return out;
}

TEST(RectangularAttention, EmptyKbReducesToCausalAttention) {
  Rng rng(100);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t heads = 1 + rng.below(4), d = heads * (1 + rng.below(4)), n = 1 + rng.below(7);
    const Tensor q = random_matrix(rng, n, d), k = random_matrix(rng, n, d), v = random_matrix(rng, n, d);
    const Tensor qt = random_matrix(rng, n, d), none = Tensor::matrix(0, d);
    const auto r = rectangular_attention(q, qt, k, v, none, none, heads, true);
    const Tensor ref = naive_attention(q, qt, k, v, none, none, heads);
    ASSERT_EQ(r.output.shape(), ref.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.output.data()[i], ref.data()[i], 1e-12);
    EXPECT_EQ(r.kb_logits.shape(), (Shape{heads, n, 0}));
  }
}

TEST(RectangularAttention, MatchesScalarReference) {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng.below(3), d = heads * (1 + rng.below(3));
    const std::size_t n = 1 + rng.below(5), m = rng.below(6);
    const Tensor q = random_matrix(rng, n, d), qt = random_matrix(rng, n, d);
    const Tensor k = random_matrix(rng, n, d), v = random_matrix(rng, n, d);
    const Tensor kk = random_matrix(rng, m, d), kv = random_matrix(rng, m, d);
    const auto r = rectangular_attention(q, qt, k, v, kk, kv, heads, true);
    const Tensor ref = naive_attention(q, qt, k, v, kk, kv, heads);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.output.data()[i], ref.data()[i], 1e-12);
    EXPECT_EQ(r.output.rows(), n);
    EXPECT_EQ(r.output.cols(), d);
  }
}

TEST(RectangularAttention, HandExample) {
  // N=2, M=1, D=2, H=1. Scale 1/sqrt(2).
  const Tensor q = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor qt = Tensor::from_rows({{0, 0}, {1, 1}});
  const Tensor k = Tensor::from_rows({{1, 1}, {0, 2}});
  const Tensor v = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor kk = Tensor::from_rows({{2, 0}});
  const Tensor kv = Tensor::from_rows({{3, 3}});
  const auto r = rectangular_attention(q, qt, k, v, kk, kv, 1, true);
  const double s = 1.0 / std::sqrt(2.0);
  // Row 0: logits [0, s*1]; values kv, v0.
  const double a0 = 1.0, b0 = std::exp(s);
  EXPECT_NEAR(r.output(0, 0), (a0 * 3 + b0 * 1) / (a0 + b0), 1e-15);
  EXPECT_NEAR(r.output(0, 1), (a0 * 3) / (a0 + b0), 1e-15);
  // Row 1: logits [2s, s, 2s]; values kv, v0, v1.
  const double a1 = std::exp(2 * s), b1 = std::exp(s), c1 = std::exp(2 * s), z1 = a1 + b1 + c1;
  EXPECT_NEAR(r.output(1, 0), (3 * a1 + b1) / z1, 1e-15);
  EXPECT_NEAR(r.output(1, 1), (3 * a1 + c1) / z1, 1e-15);
  EXPECT_NEAR(r.kb_logits(0, 0, 0), 0.0, 1e-15);
  EXPECT_NEAR(r.kb_logits(0, 1, 0), 2 * s, 1e-15);
}

TEST(RectangularAttention, UnifiedRowsSumToOne) {
  Rng rng(102);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t heads = 1 + rng.below(4), d = heads * (1 + rng.below(4));
    const std::size_t n = 1 + rng.below(8), m = rng.below(12);
    const HeadLayout layout(d, heads);
    const Tensor kbl = head_logits(random_matrix(rng, n, d, 3), random_matrix(rng, m, d), layout);
    const Tensor tokl = head_logits(random_matrix(rng, n, d, 3), random_matrix(rng, n, d), layout);
    const auto r = attend(kbl, tokl, random_matrix(rng, m, d), random_matrix(rng, n, d), layout, true);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < m + n; ++j) {
          const double p = r.probabilities(h, i, j);
          if (j >= m + i + 1) {
            EXPECT_EQ(p, 0.0);
          }
          s += p;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(RectangularAttention, HeadsMustDivideWidth) {
  const Tensor x = Tensor::matrix(2, 6);
  EXPECT_THROW(rectangular_attention(x, x, x, x, Tensor::matrix(0, 6), Tensor::matrix(0, 6), 4, true),
               ConfigError);
}

// ---- full model ---------------------------------------------------------------

struct Toy {
  ModelConfig cfg;
  Backbone backbone;
  AdapterSet adapters;
  KbStore kb;
  std::vector<TokenId> tokens;
};

AdapterSet random_adapters(const ModelConfig& cfg, Rng& rng, double sd) {
  AdapterSet a;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    a.layers.push_back({random_matrix(rng, cfg.width, cfg.width, sd),
                        random_matrix(rng, cfg.encoder_dim, cfg.width, sd),
                        random_matrix(rng, cfg.encoder_dim, cfg.width, sd)});
  }
  return a;
}

Toy make_toy(std::uint64_t seed, std::size_t layers = 2) {
  Toy t;
  t.cfg.layers = layers;
  t.cfg.width = 8;
  t.cfg.heads = 2;
  t.cfg.vocab = 30;
  t.cfg.encoder_dim = 4;
  t.cfg.max_seq = 12;
  t.backbone = Backbone::random(t.cfg, seed);
  Rng rng(seed);
  t.adapters = random_adapters(t.cfg, rng, 0.7);
  std::vector<Triple> ts;
  for (int i = 0; i < 3; ++i) ts.push_back({"s" + std::to_string(i), "r" + std::to_string(i % 2), "o"});
  t.kb = build_kb(ts, true, seed, KbOptions{4, 17, 2});
  t.tokens = {0, 3, 5, 2, 9, 4};
  return t;
}

TEST(Forward, PlanAllEqualsNoPlan) {
  const Toy t = make_toy(1);
  const auto a = forward(t.backbone, t.adapters, t.kb, t.tokens);
  const auto b = forward(t.backbone, t.adapters, t.kb, t.tokens,
                         CompressionPlan::all(t.cfg.layers, t.kb.size()));
  EXPECT_EQ(a.lm_logits, b.lm_logits);
  ASSERT_EQ(a.trace.layers.size(), t.cfg.layers);
  for (const auto& l : a.trace.layers) EXPECT_EQ(l.abar.size(), t.kb.size());
}

TEST(Forward, ZeroKeyAdapterGivesUniformKbAttention) {
  Toy t = make_toy(2);
  for (auto& l : t.adapters.layers) l.key.fill(0.0);
  const auto out = forward(t.backbone, t.adapters, t.kb, t.tokens);
  for (const auto& l : out.trace.layers) {
    for (double v : l.kb_logits.data()) EXPECT_EQ(v, 0.0);
    for (double v : l.abar) EXPECT_EQ(v, 0.0);
  }
}

TEST(Forward, Deterministic) {
  const Toy a = make_toy(3), b = make_toy(3);
  EXPECT_EQ(forward(a.backbone, a.adapters, a.kb, a.tokens).lm_logits,
            forward(b.backbone, b.adapters, b.kb, b.tokens).lm_logits);
}

TEST(Forward, CausalInvariance) {
  const Toy t = make_toy(4);
  const auto base = forward(t.backbone, t.adapters, t.kb, t.tokens);
  for (std::size_t i = 0; i + 1 < t.tokens.size(); ++i) {
    auto changed = t.tokens;
    for (std::size_t j = i + 1; j < changed.size(); ++j) changed[j] = (changed[j] + 5) % t.cfg.vocab;
    const auto out = forward(t.backbone, t.adapters, t.kb, changed);
    for (std::size_t r = 0; r <= i; ++r) {
      for (std::size_t c = 0; c < t.cfg.vocab; ++c) EXPECT_EQ(out.lm_logits(r, c), base.lm_logits(r, c));
    }
  }
}

TEST(Forward, PermutingKbPermutesAbar) {
  const Toy t = make_toy(5);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  const KbStore shuffled = t.kb.subset(perm);
  const auto a = forward(t.backbone, t.adapters, t.kb, t.tokens);
  const auto b = forward(t.backbone, t.adapters, shuffled, t.tokens);
  for (std::size_t i = 0; i < a.lm_logits.size(); ++i) {
    EXPECT_NEAR(a.lm_logits.data()[i], b.lm_logits.data()[i], 1e-12);
  }
  for (std::size_t l = 0; l < t.cfg.layers; ++l) {
    for (std::size_t i = 0; i < perm.size(); ++i) {
      EXPECT_NEAR(b.trace.layers[l].abar[i], a.trace.layers[l].abar[perm[i]], 1e-12);
    }
  }
  // A compressed plan permuted along with the KB gives the same logits.
  CompressionPlan p{{{0, 3, 4}, {3, 0}}};
  std::vector<std::size_t> where(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) where[perm[i]] = i;
  CompressionPlan q;
  for (const auto& l : p.layers) {
    IndexList m;
    for (std::size_t i : l) m.push_back(where[i]);
    q.layers.push_back(m);
  }
  const auto c = forward(t.backbone, t.adapters, t.kb, t.tokens, p);
  const auto d = forward(t.backbone, t.adapters, shuffled, t.tokens, q);
  for (std::size_t i = 0; i < c.lm_logits.size(); ++i) {
    EXPECT_NEAR(c.lm_logits.data()[i], d.lm_logits.data()[i], 1e-12);
  }
}

TEST(Forward, PlanOutOfRangeRejected) {
  const Toy t = make_toy(6);
  EXPECT_THROW(forward(t.backbone, t.adapters, t.kb, t.tokens, CompressionPlan{{{0, 6}, {1}}}),
               DimensionError);
  EXPECT_THROW(forward(t.backbone, t.adapters, t.kb, t.tokens, CompressionPlan{{{0}}}), ConfigError);
}

TEST(Forward, CompressedPlanRestrictsTrace) {
  const Toy t = make_toy(7);
  const auto out = forward(t.backbone, t.adapters, t.kb, t.tokens, CompressionPlan{{{5, 1}, {2}}});
  EXPECT_EQ(out.trace.layers[0].abar.size(), 2u);
  EXPECT_EQ(out.trace.layers[0].injected, (IndexList{1, 5}));
  EXPECT_EQ(out.trace.layers[1].kb_logits.shape(), (Shape{2, t.tokens.size(), 1}));
}

TEST(Forward, EmptyKbMatchesZeroValueInjectionShape) {
  const Toy t = make_toy(8);
  const auto out = forward(t.backbone, t.adapters, KbStore({}, KbOptions{4, 17, 2}), t.tokens);
  EXPECT_EQ(out.lm_logits.rows(), t.tokens.size());
  EXPECT_EQ(out.lm_logits.cols(), t.cfg.vocab);
}

TEST(Forward, BackboneReceivesNoGradient) {
  Toy t = make_toy(9);
  const Backbone before = t.backbone;
  GradTape tape;
  const auto bb = bind_backbone(tape, t.backbone);
  const auto ad = bind_adapters_trainable(tape, t.adapters);
  const auto pool = bind_pool(tape, t.kb, ad, t.cfg.width);
  const auto g = forward_graph(tape, t.cfg, bb, ad, pool, t.tokens, schedule_all(t.cfg.layers));
  std::vector<TokenId> targets(t.tokens.begin() + 1, t.tokens.end());
  targets.push_back(1);
  const Var loss = ag::cross_entropy(tape, g.logits, targets, std::vector<bool>(targets.size(), true));
  tape.backward(loss);
  const auto grads = tape.parameter_grads();
  EXPECT_EQ(grads.size(), 3 * t.cfg.layers);
  const auto params = t.adapters.parameters();
  for (std::size_t i = 0; i < grads.size(); ++i) EXPECT_EQ(grads[i].param, params[i]);
  EXPECT_FALSE(tape.requires_grad(bb.token_embedding));
  EXPECT_FALSE(tape.requires_grad(bb.layers[0].wq));
  const auto pb = before.parameters(), pa = std::as_const(t.backbone).parameters();
  for (std::size_t i = 0; i < pb.size(); ++i) EXPECT_EQ(*pb[i], *pa[i]);
}

TEST(LmLoss, EmptyAnswerSpanRejected) {
  const std::vector<TokenId> targets{1, 2};
  EXPECT_THROW(lm_loss(Tensor::matrix(2, 3), targets, {false, false}), DegenerateError);
  EXPECT_NEAR(lm_loss(Tensor::matrix(2, 4), targets, {false, true}), std::log(4.0), 1e-12);
}

// ---- decoding -------------------------------------------------------------------

Tokenizer toy_tokenizer() {
  std::vector<std::string> words;
  for (int i = 0; i < 2; ++i) words.push_back("w" + std::to_string(i));
  return Tokenizer(words);
}

TEST(Decode, PrefillAndStepsMatchFullForward) {
  const Toy t = make_toy(10, 3);
  DecodeSession s(t.backbone, t.adapters, t.kb, schedule_all(t.cfg.layers));
  const std::vector<TokenId> prompt(t.tokens.begin(), t.tokens.begin() + 3);
  std::vector<std::vector<double>> rows{s.prefill(prompt)};
  for (std::size_t i = 3; i < t.tokens.size(); ++i) rows.push_back(s.step(t.tokens[i]));
  const auto full = forward(t.backbone, t.adapters, t.kb, t.tokens);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < t.cfg.vocab; ++c) {
      EXPECT_NEAR(rows[r][c], full.lm_logits(2 + r, c), 1e-10);
    }
  }
}

TEST(Decode, CompressedSessionMatchesPlannedForward) {
  const Toy t = make_toy(11, 3);
  CompressionPolicy pol{CompressionMode::reuse, 2, 1, 7};
  DecodeSession s(t.backbone, t.adapters, t.kb, schedule_from_policy(pol, 3, t.kb.size(), 0));
  const std::vector<TokenId> prompt(t.tokens.begin(), t.tokens.begin() + 4);
  std::vector<std::vector<double>> rows{s.prefill(prompt)};
  for (std::size_t i = 4; i < t.tokens.size(); ++i) rows.push_back(s.step(t.tokens[i]));
  const CompressionPlan plan = s.plan();
  EXPECT_EQ(plan.layers[2], plan.layers[1]);
  EXPECT_EQ(s.resident_kb_rows(), (std::vector<std::size_t>{2, 2, 2}));
  const auto full = forward(t.backbone, t.adapters, t.kb, t.tokens, plan);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < t.cfg.vocab; ++c) EXPECT_NEAR(rows[r][c], full.lm_logits(3 + r, c), 1e-10);
  }
}

TEST(Decode, NonePolicySelectsEverything) {
  const Toy t = make_toy(12);
  const Tokenizer tok = toy_tokenizer();
  ASSERT_EQ(tok.size(), t.cfg.vocab);
  const std::vector<TokenId> prompt{0, 4, 7};
  const auto r = decode(t.backbone, t.adapters, t.kb, tok, prompt, 4, CompressionPolicy{});
  EXPECT_EQ(r.plan, CompressionPlan::all(t.cfg.layers, t.kb.size()));
  EXPECT_GE(r.tokens.size(), 1u);
  EXPECT_LE(r.tokens.size(), 4u);
}

TEST(Decode, ReuseWithLargeKMatchesNone) {
  const Toy t = make_toy(13, 3);
  const Tokenizer tok = toy_tokenizer();
  const std::vector<TokenId> prompt{0, 4, 7, 2};
  const auto a = decode(t.backbone, t.adapters, t.kb, tok, prompt, 5, CompressionPolicy{});
  const auto b = decode(t.backbone, t.adapters, t.kb, tok, prompt, 5,
                        CompressionPolicy{CompressionMode::reuse, 100, 1, 7});
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.text, b.text);
}

TEST(Decode, MaxNewMustBePositive) {
  const Toy t = make_toy(14);
  const std::vector<TokenId> prompt{0};
  EXPECT_THROW(decode(t.backbone, t.adapters, t.kb, toy_tokenizer(), prompt, 0, CompressionPolicy{}),
               ConfigError);
}

TEST(LexicalEmbeddings, CopiesWordFeatures) {
  Toy t = make_toy(15);
  const Tokenizer tok = toy_tokenizer();
  const Tensor before = t.backbone.token_embedding;
  seed_lexical_embeddings(t.backbone, tok, 17);
  for (TokenId id = 0; id < tok.size(); ++id) {
    const auto row = t.backbone.token_embedding.row(id);
    if (id == tok.bos() || id == tok.eos()) {
      for (std::size_t c = 0; c < t.cfg.width; ++c) EXPECT_EQ(row[c], before(id, c));
      continue;
    }
    const auto f = word_feature(tok.word(id), 17, 4);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(row[c], f[c]);
    for (std::size_t c = 4; c < t.cfg.width; ++c) EXPECT_EQ(row[c], before(id, c));
  }
}

}  // namespace
}  // namespace srki
