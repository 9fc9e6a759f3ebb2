#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srki/adapters.hpp"
#include "srki/attention.hpp"
#include "srki/autograd.hpp"
#include "srki/kb.hpp"
#include "srki/retrieval.hpp"
#include "srki/rng.hpp"
#include "srki/tokenizer.hpp"

namespace srki {

struct LayerWeights {
  Tensor wq, wk, wv, wo;  // D x D
  Tensor w1;              // D x F
  Tensor w2;              // F x D
};

// Decoder-only transformer: learned absolute positions, pre-norm blocks with
// parameter-free RMS normalization, GELU feed-forward, untied output head.
struct Backbone {
  ModelConfig config;
  Tensor token_embedding;     // V x D
  Tensor position_embedding;  // max_seq x D
  std::vector<LayerWeights> layers;
  Tensor unembedding;  // D x V

  static Backbone random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0xBAC4B0));
    auto normal = [&](std::size_t r, std::size_t c, double sd) {
      Tensor t = Tensor::matrix(r, c);
      for (double& v : t.data()) v = sd * rng.normal();
      return t;
    };
    const std::size_t d = cfg.width, f = cfg.width * cfg.ffn_mult;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_sd = sd / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    Backbone b;
    b.config = cfg;
    b.token_embedding = normal(cfg.vocab, d, 1.0);
    b.position_embedding = normal(cfg.max_seq, d, 0.5);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      b.layers.push_back({normal(d, d, sd), normal(d, d, sd), normal(d, d, sd), normal(d, d, out_sd),
                          normal(d, f, sd), normal(f, d, out_sd / std::sqrt(double(cfg.ffn_mult)))});
    }
    b.unembedding = normal(d, cfg.vocab, sd);
    return b;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out{&token_embedding, &position_embedding};
    for (auto& l : layers) {
      for (Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) out.push_back(t);
    }
    out.push_back(&unembedding);
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<Backbone*>(this)->parameters()) out.push_back(t);
    return out;
  }
};

// Overwrites the first P columns of every word's token embedding with the
// encoder's feature for that word, so backbone and encoder share lexical
// structure. <bos>/<eos> keep their random rows.
inline void seed_lexical_embeddings(Backbone& b, const Tokenizer& tok, std::uint64_t encoder_seed) {
  const std::size_t p = b.config.encoder_dim;
  if (p > b.config.width) throw ConfigError("seed_lexical_embeddings: encoder_dim exceeds width");
  if (tok.size() != b.config.vocab) throw ConfigError("seed_lexical_embeddings: vocabulary size mismatch");
  for (TokenId id = 0; id < tok.size(); ++id) {
    if (id == tok.bos() || id == tok.eos()) continue;
    const auto f = word_feature(tok.word(id), encoder_seed, p);
    std::copy(f.begin(), f.end(), b.token_embedding.row(id).begin());
  }
}

// ---- tape bindings ---------------------------------------------------------

struct BackboneVars {
  struct Layer {
    Var wq, wk, wv, wo, w1, w2;
  };
  Var token_embedding, position_embedding, unembedding;
  std::vector<Layer> layers;
};

inline BackboneVars bind_backbone(GradTape& t, const Backbone& b) {
  BackboneVars v;
  v.token_embedding = t.constant(b.token_embedding);
  v.position_embedding = t.constant(b.position_embedding);
  for (const auto& l : b.layers) {
    v.layers.push_back({t.constant(l.wq), t.constant(l.wk), t.constant(l.wv), t.constant(l.wo),
                        t.constant(l.w1), t.constant(l.w2)});
  }
  v.unembedding = t.constant(b.unembedding);
  return v;
}

// Registers every backbone weight as a tape parameter (backbone pretraining).
inline BackboneVars bind_backbone_trainable(GradTape& t, Backbone& b) {
  BackboneVars v;
  v.token_embedding = t.parameter(b.token_embedding);
  v.position_embedding = t.parameter(b.position_embedding);
  for (auto& l : b.layers) {
    v.layers.push_back({t.parameter(l.wq), t.parameter(l.wk), t.parameter(l.wv), t.parameter(l.wo),
                        t.parameter(l.w1), t.parameter(l.w2)});
  }
  v.unembedding = t.parameter(b.unembedding);
  return v;
}

struct AdapterVars {
  struct Layer {
    Var query, key, value;
  };
  std::vector<Layer> layers;
};

inline AdapterVars bind_adapters(GradTape& t, const AdapterSet& a) {
  AdapterVars v;
  for (const auto& l : a.layers) {
    v.layers.push_back({t.constant(l.query), t.constant(l.key), t.constant(l.value)});
  }
  return v;
}

inline AdapterVars bind_adapters_trainable(GradTape& t, AdapterSet& a) {
  AdapterVars v;
  for (auto& l : a.layers) {
    v.layers.push_back({t.parameter(l.query), t.parameter(l.key), t.parameter(l.value)});
  }
  return v;
}

// Per-layer projected KB keys/values over a whole pool; shared by every
// sequence forwarded against that pool on the same tape.
struct PoolVars {
  std::size_t size = 0;
  Tensor key_embeddings;  // M x P, used for no-grad selection scoring
  std::vector<Var> keys;    // per layer, M x D
  std::vector<Var> values;  // per layer, M x D
};

inline PoolVars bind_pool(GradTape& t, const KbStore& kb, const AdapterVars& adapters,
                          std::size_t width) {
  PoolVars p;
  p.size = kb.size();
  p.key_embeddings = kb.size() ? kb.key_matrix() : Tensor::matrix(0, kb.dim());
  const Var ke = t.constant(p.key_embeddings);
  const Var ve = t.constant(kb.size() ? kb.value_matrix() : Tensor::matrix(0, kb.dim()));
  for (const auto& l : adapters.layers) {
    if (kb.size() == 0) {
      p.keys.push_back(t.constant(Tensor::matrix(0, width)));
      p.values.push_back(t.constant(Tensor::matrix(0, width)));
    } else {
      p.keys.push_back(ag::matmul(t, ke, l.key));
      p.values.push_back(ag::matmul(t, ve, l.value));
    }
  }
  return p;
}

// ---- traces ----------------------------------------------------------------

struct LayerTrace {
  IndexList selected;  // resolved selection, in selection order
  IndexList injected;  // the same indices ascending: the order rows enter attention
  Tensor kb_logits;    // H x N x |injected|
  std::vector<double> abar;       // length |injected|
  std::vector<double> pool_abar;  // length M when the layer scored the full pool, else empty
};

struct RectAttnTrace {
  std::vector<LayerTrace> layers;

  CompressionPlan plan() const {
    CompressionPlan p;
    for (const auto& l : layers) p.layers.push_back(l.selected);
    return p;
  }
};

inline IndexList ascending(IndexList idx) {
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline bool is_identity_list(const IndexList& idx, std::size_t m) {
  if (idx.size() != m) return false;
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] != i) return false;
  }
  return true;
}

// ---- differentiable forward -----------------------------------------------

struct ForwardGraph {
  Var logits;  // N x V
  std::vector<Var> kb_logits;  // per layer, H x N x |injected|
  std::vector<Var> abar;       // per layer, 1 x |injected|
  RectAttnTrace trace;         // values only
};

inline ForwardGraph forward_graph(GradTape& t, const ModelConfig& cfg, const BackboneVars& bb,
                                  const AdapterVars& ad, const PoolVars& pool,
                                  std::span<const TokenId> tokens,
                                  const InjectionSchedule& schedule) {
  const std::size_t n = tokens.size();
  if (n == 0) throw ConfigError("forward: empty token sequence");
  if (n > cfg.max_seq) {
    throw ConfigError("forward: sequence length " + std::to_string(n) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  if (schedule.size() != cfg.layers) throw ConfigError("forward: schedule/layer count mismatch");
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  for (std::size_t id : ids) {
    if (id >= cfg.vocab) throw ConfigError("forward: token id out of vocabulary");
  }
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});

  const HeadLayout layout(cfg.width, cfg.heads);
  ForwardGraph g;
  Var x = ag::add(t, ag::gather_rows(t, bb.token_embedding, ids),
                  ag::gather_rows(t, bb.position_embedding, positions));
  std::vector<IndexList> resolved;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& w = bb.layers[l];
    const Var h = ag::rms_norm(t, x);
    const Var q = ag::matmul(t, h, w.wq);
    const Var k = ag::matmul(t, h, w.wk);
    const Var v = ag::matmul(t, h, w.wv);
    const Var qt = ag::matmul(t, h, ad.layers[l].query);

    const SelectionRule& rule = schedule[l];
    LayerTrace lt;
    std::vector<double> scores;
    if (rule.needs_scores()) {
      const Tensor full = head_logits(t.value(qt), t.value(pool.keys[l]), layout);
      lt.pool_abar = aggregate_kb_attention(full);
      scores = rule.scoring == Scoring::maxpool ? maxpool_aggregate(full, rule.kernel) : lt.pool_abar;
    }
    lt.selected = resolve_rule(rule, scores, pool.size, resolved);
    resolved.push_back(lt.selected);
    lt.injected = ascending(lt.selected);

    Var kbk = pool.keys[l], kbv = pool.values[l];
    if (!is_identity_list(lt.injected, pool.size)) {
      kbk = ag::gather_rows(t, pool.keys[l], lt.injected);
      kbv = ag::gather_rows(t, pool.values[l], lt.injected);
    }
    const Var kbl = ag::head_logits(t, qt, kbk, layout);
    const Var tokl = ag::head_logits(t, q, k, layout);
    const Var att = ag::attend(t, kbl, tokl, kbv, v, layout, /*causal=*/true);
    x = ag::add(t, x, ag::matmul(t, att, w.wo));
    const Var h2 = ag::rms_norm(t, x);
    x = ag::add(t, x, ag::matmul(t, ag::gelu(t, ag::matmul(t, h2, w.w1)), w.w2));

    const Var abar = ag::mean_heads_queries(t, kbl);
    lt.kb_logits = t.value(kbl);
    lt.abar = t.value(abar).values();
    if (rule.kind == SelectionRule::Kind::all) lt.pool_abar = lt.abar;
    g.kb_logits.push_back(kbl);
    g.abar.push_back(abar);
    g.trace.layers.push_back(std::move(lt));
  }
  g.logits = ag::matmul(t, ag::rms_norm(t, x), bb.unembedding);
  return g;
}

struct ForwardOutput {
  Tensor lm_logits;  // N x V
  RectAttnTrace trace;
};

// Full-sequence forward pass. Without a plan every layer sees the whole KB.
inline ForwardOutput forward(const Backbone& backbone, const AdapterSet& adapters,
                             const KbStore& kb, std::span<const TokenId> tokens,
                             const std::optional<CompressionPlan>& plan = std::nullopt) {
  adapters.validate(backbone.config);
  InjectionSchedule schedule = schedule_all(backbone.config.layers);
  if (plan) {
    if (plan->layers.size() != backbone.config.layers) {
      throw ConfigError("forward: plan has " + std::to_string(plan->layers.size()) +
                        " layers, model has " + std::to_string(backbone.config.layers));
    }
    plan->validate(kb.size());
    schedule = schedule_from_plan(*plan);
  }
  GradTape t;
  const auto bb = bind_backbone(t, backbone);
  const auto ad = bind_adapters(t, adapters);
  const auto pool = bind_pool(t, kb, ad, backbone.config.width);
  ForwardGraph g = forward_graph(t, backbone.config, bb, ad, pool, tokens, schedule);
  return {t.value(g.logits), std::move(g.trace)};
}

// Teacher-forced language-modeling loss over the answer span.
inline double lm_loss(const Tensor& lm_logits, std::span<const TokenId> targets,
                      const std::vector<bool>& answer_mask) {
  if (std::none_of(answer_mask.begin(), answer_mask.end(), [](bool b) { return b; })) {
    throw DegenerateError("lm_loss: empty answer span");
  }
  return cross_entropy(lm_logits, targets, answer_mask);
}

// ---- incremental decoding ----------------------------------------------------

// Inference with a token KV cache. The prefill pass resolves each layer's KB
// selection from the prompt; afterwards the selection (and its projected KB
// rows) is frozen and each new token only attends the cached rows.
class DecodeSession {
 public:
  DecodeSession(const Backbone& backbone, const AdapterSet& adapters, const KbStore& kb,
                InjectionSchedule schedule, std::size_t score_chunk = 256)
      : bb_(backbone),
        ad_(adapters),
        kb_(kb),
        schedule_(std::move(schedule)),
        layout_(backbone.config.width, backbone.config.heads),
        chunk_(score_chunk) {
    adapters.validate(backbone.config);
    if (schedule_.size() != backbone.config.layers) {
      throw ConfigError("DecodeSession: schedule/layer count mismatch");
    }
    if (kb.size() && kb.dim() != backbone.config.encoder_dim) {
      throw DimensionError("DecodeSession: KB dimension " + std::to_string(kb.dim()) +
                           " != encoder_dim " + std::to_string(backbone.config.encoder_dim));
    }
  }

  // Returns the logits row for the next token after the prompt.
  std::vector<double> prefill(std::span<const TokenId> prompt) {
    const auto& cfg = bb_.config;
    if (prompt.empty()) throw ConfigError("prefill: empty prompt");
    if (prompt.size() > cfg.max_seq) throw ConfigError("prefill: prompt exceeds max_seq");
    caches_.assign(cfg.layers, {});
    trace_ = {};
    Tensor x = embed(prompt, 0);
    std::vector<IndexList> resolved;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& w = bb_.layers[l];
      const auto& a = ad_.layers[l];
      const Tensor h = rms_norm_values(x);
      const Tensor q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
      const Tensor qt = matmul(h, a.query);

      const SelectionRule& rule = schedule_[l];
      LayerTrace lt;
      std::vector<double> scores;
      if (rule.needs_scores() || rule.kind == SelectionRule::Kind::all) {
        lt.pool_abar = streamed_pool_scores(qt, key_embeddings(), a.key, layout_,
                                            Scoring::mean_logit, 1, chunk_);
        scores = lt.pool_abar;
        if (rule.needs_scores() && rule.scoring == Scoring::maxpool) {
          scores = streamed_pool_scores(qt, key_embeddings(), a.key, layout_, Scoring::maxpool,
                                        rule.kernel, chunk_);
        }
      }
      lt.selected = resolve_rule(rule, scores, kb_.size(), resolved);
      resolved.push_back(lt.selected);
      lt.injected = ascending(lt.selected);

      LayerCache& c = caches_[l];
      if (kb_.size()) {
        c.kb_keys = matmul(gather_rows(kb_.key_matrix(), lt.injected), a.key);
        c.kb_values = matmul(gather_rows(kb_.value_matrix(), lt.injected), a.value);
      } else {
        c.kb_keys = Tensor::matrix(0, cfg.width);
        c.kb_values = Tensor::matrix(0, cfg.width);
      }
      c.token_keys = k;
      c.token_values = v;

      Tensor kbl = head_logits(qt, c.kb_keys, layout_);
      const Tensor tokl = head_logits(q, k, layout_);
      AttendResult r = attend(kbl, tokl, c.kb_values, v, layout_, true, 0);
      add_inplace(x, matmul(r.output, w.wo));
      add_inplace(x, matmul(gelu_values(matmul(rms_norm_values(x), w.w1)), w.w2));

      lt.abar = aggregate_kb_attention(kbl);
      lt.kb_logits = std::move(kbl);
      trace_.layers.push_back(std::move(lt));
    }
    length_ = prompt.size();
    return last_row_logits(x);
  }

  // Appends one token and returns the logits row for the following position.
  std::vector<double> step(TokenId token) {
    const auto& cfg = bb_.config;
    if (caches_.empty()) throw ConfigError("step: prefill first");
    if (length_ >= cfg.max_seq) throw ConfigError("step: max_seq reached");
    const TokenId ids[1] = {token};
    Tensor x = embed(ids, length_);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& w = bb_.layers[l];
      LayerCache& c = caches_[l];
      const Tensor h = rms_norm_values(x);
      const Tensor q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
      const Tensor qt = matmul(h, ad_.layers[l].query);
      c.token_keys.append_rows(k);
      c.token_values.append_rows(v);
      const Tensor kbl = head_logits(qt, c.kb_keys, layout_);
      const Tensor tokl = head_logits(q, c.token_keys, layout_);
      AttendResult r = attend(kbl, tokl, c.kb_values, c.token_values, layout_, true, length_);
      add_inplace(x, matmul(r.output, w.wo));
      add_inplace(x, matmul(gelu_values(matmul(rms_norm_values(x), w.w1)), w.w2));
    }
    ++length_;
    return last_row_logits(x);
  }

  std::size_t length() const { return length_; }
  const RectAttnTrace& trace() const { return trace_; }
  CompressionPlan plan() const { return trace_.plan(); }

  // KB rows held per layer after selection.
  std::vector<std::size_t> resident_kb_rows() const {
    std::vector<std::size_t> out;
    for (const auto& c : caches_) out.push_back(c.kb_keys.rows());
    return out;
  }

 private:
  struct LayerCache {
    Tensor kb_keys, kb_values;
    Tensor token_keys, token_values;
  };

  const Tensor& key_embeddings() const { return kb_.size() ? kb_.key_matrix() : empty_keys_; }

  Tensor embed(std::span<const TokenId> ids, std::size_t offset) const {
    std::vector<std::size_t> tok(ids.begin(), ids.end()), pos(ids.size());
    for (std::size_t id : tok) {
      if (id >= bb_.config.vocab) throw ConfigError("decode: token id out of vocabulary");
    }
    std::iota(pos.begin(), pos.end(), offset);
    Tensor x = gather_rows(bb_.token_embedding, tok);
    add_inplace(x, gather_rows(bb_.position_embedding, pos));
    return x;
  }

  std::vector<double> last_row_logits(const Tensor& x) const {
    const Tensor hf = rms_norm_values(x);
    const std::size_t last = hf.rows() - 1;
    const Tensor row = gather_rows(hf, std::vector<std::size_t>{last});
    return matmul(row, bb_.unembedding).values();
  }

  const Backbone& bb_;
  const AdapterSet& ad_;
  const KbStore& kb_;
  InjectionSchedule schedule_;
  HeadLayout layout_;
  std::size_t chunk_;
  Tensor empty_keys_ = Tensor::matrix(0, 1);
  std::vector<LayerCache> caches_;
  RectAttnTrace trace_;
  std::size_t length_ = 0;
};

inline TokenId greedy_argmax(std::span<const double> logits) {
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

struct DecodeResult {
  std::vector<TokenId> tokens;  // generated, excluding the prompt; includes <eos> if emitted
  std::string text;
  CompressionPlan plan;
  RectAttnTrace trace;
};

// Greedy decoding with a fixed per-layer injection schedule.
inline DecodeResult decode_with_schedule(const Backbone& backbone, const AdapterSet& adapters,
                                         const KbStore& kb, const Tokenizer& tokenizer,
                                         std::span<const TokenId> prompt, std::size_t max_new,
                                         InjectionSchedule schedule, std::size_t score_chunk = 256) {
  if (max_new < 1) throw ConfigError("decode: max_new must be >= 1");
  DecodeSession s(backbone, adapters, kb, std::move(schedule), score_chunk);
  DecodeResult r;
  std::vector<double> logits = s.prefill(prompt);
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = greedy_argmax(logits);
    r.tokens.push_back(next);
    if (next == tokenizer.eos() || s.length() >= backbone.config.max_seq) break;
    if (i + 1 < max_new) logits = s.step(next);
  }
  r.text = tokenizer.decode(r.tokens);
  r.plan = s.plan();
  r.trace = s.trace();
  return r;
}

inline DecodeResult decode(const Backbone& backbone, const AdapterSet& adapters, const KbStore& kb,
                           const Tokenizer& tokenizer, std::span<const TokenId> prompt,
                           std::size_t max_new, const CompressionPolicy& policy,
                           std::uint64_t seed = 0, std::size_t score_chunk = 256) {
  return decode_with_schedule(
      backbone, adapters, kb, tokenizer, prompt, max_new,
      schedule_from_policy(policy, backbone.config.layers, kb.size(), seed), score_chunk);
}

}  // namespace srki
