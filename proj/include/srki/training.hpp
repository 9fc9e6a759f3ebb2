#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "srki/autograd.hpp"
#include "srki/datagen.hpp"
#include "srki/eval.hpp"
#include "srki/model.hpp"
#include "srki/retrieval.hpp"

namespace srki {

struct TrainConfig {
  double learning_rate = 1e-4;
  double warmup_ratio = 1e-2;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t steps = 100;
  double temperature = 0.05;  // T
  std::size_t k_train = 50;
  std::size_t m_train = 200;
  std::uint64_t seed = 0;
  BatchMix mix;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("TrainConfig: temperature must be > 0");
    if (k_train < 1 || k_train > m_train) {
      throw ConfigError("TrainConfig: need 1 <= k_train <= m_train, got k_train=" +
                        std::to_string(k_train) + ", m_train=" + std::to_string(m_train));
    }
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate >= 0) || !(weight_decay >= 0)) {
      throw ConfigError("TrainConfig: learning rate and weight decay must be >= 0");
    }
    if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) {
      throw ConfigError("TrainConfig: warmup_ratio must lie in [0, 1]");
    }
    if (mix.single < 0 || mix.multi < 0 || mix.unanswerable < 0 ||
        mix.single + mix.multi + mix.unanswerable <= 0) {
      throw ConfigError("TrainConfig: invalid batch mix");
    }
  }
};

// ---- optimizer -----------------------------------------------------------------

// Linear warm-up followed by cosine decay to zero.
inline double scheduled_lr(double base, std::size_t step, std::size_t total, double warmup_ratio) {
  if (total == 0) return base;
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warm));
  const double progress = static_cast<double>(step - warm) / span;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

class AdamW {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamGrad>& grads, double lr) {
    if (m_.empty()) {
      for (const auto& g : grads) {
        m_.emplace_back(g.grad.shape());
        v_.emplace_back(g.grad.shape());
      }
    }
    if (m_.size() != grads.size()) throw ConfigError("AdamW: parameter set changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto p = grads[i].param->data();
      auto g = grads[i].grad.data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1_ * m[j] + (1 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1 - b2_) * g[j] * g[j];
        p[j] -= lr * ((m[j] / c1) / (std::sqrt(v[j] / c2) + eps_) + wd_ * p[j]);
      }
    }
  }

 private:
  double wd_, b1_, b2_, eps_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// ---- loss curves ------------------------------------------------------------------

struct LossPoint {
  std::size_t step = 0;
  double l_lm = 0;
  double l_a = 0;
};

using LossCurve = std::vector<LossPoint>;

inline void write_loss_csv(std::ostream& os, const LossCurve& curve) {
  os << "step,l_lm,l_a\n";
  for (const auto& p : curve) {
    os << p.step << ',' << std::setprecision(17) << p.l_lm << ',' << p.l_a << '\n';
  }
}

// ---- adapters ----------------------------------------------------------------------

inline AdapterSet init_adapters(const Backbone& bb, std::uint64_t seed) {
  const auto& cfg = bb.config;
  Rng rng(derive_seed(seed, 0xADA9));
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.encoder_dim));
  auto normal = [&]() {
    Tensor t = Tensor::matrix(cfg.encoder_dim, cfg.width);
    for (double& v : t.data()) v = sd * rng.normal();
    return t;
  };
  AdapterSet a;
  for (const auto& l : bb.layers) {
    LayerAdapters la;
    la.query = l.wq;
    la.key = normal();
    la.value = normal();
    a.layers.push_back(std::move(la));
  }
  return a;
}

// ---- hard negatives and the attention loss -----------------------------------------

struct CandidateSet {
  std::size_t correct = 0;
  IndexList negatives;
};

// Top-k_train of Ā; correct entries outside it are supplemented and the same
// number of lowest-scoring negatives dropped. All sets share one negative pool.
inline std::vector<CandidateSet> select_hard_negatives(std::span<const double> abar,
                                                       std::span<const std::size_t> correct,
                                                       std::size_t k_train) {
  const std::set<std::size_t> want(correct.begin(), correct.end());
  if (want.size() != correct.size()) throw ConfigError("select_hard_negatives: duplicate correct index");
  if (k_train < want.size()) {
    throw ConfigError("select_hard_negatives: k_train " + std::to_string(k_train) + " < " +
                      std::to_string(want.size()) + " correct indices");
  }
  for (std::size_t c : want) {
    if (c >= abar.size()) throw DimensionError("select_hard_negatives: correct index out of range");
  }
  const IndexList top = topk_indices(abar, k_train);
  IndexList negatives;
  std::size_t present = 0;
  for (std::size_t i : top) {
    if (want.count(i)) {
      ++present;
    } else {
      negatives.push_back(i);  // descending score
    }
  }
  const std::size_t missing = want.size() - present;
  negatives.resize(negatives.size() - std::min(missing, negatives.size()));
  std::vector<CandidateSet> out;
  for (std::size_t c : correct) out.push_back({c, negatives});
  return out;
}

// L_a = -(1/J) sum_j log softmax_T(Ā over {i_j} ∪ negatives)[i_j].
inline double attention_loss(std::span<const double> abar, const std::vector<CandidateSet>& sets,
                             double temperature) {
  if (!(temperature > 0)) throw ConfigError("attention_loss: temperature must be > 0");
  if (sets.empty()) throw DegenerateError("attention_loss: no candidate sets");
  double total = 0.0;
  std::vector<double> z;
  for (const auto& s : sets) {
    z.assign(1, abar[s.correct] / temperature);
    for (std::size_t i : s.negatives) z.push_back(abar[i] / temperature);
    total += log_sum_exp(z) - z[0];
  }
  return total / static_cast<double>(sets.size());
}

namespace ag {

// Differentiable attention loss over a 1 x M row of Ā.
inline Var attention_loss(GradTape& t, Var abar, std::vector<CandidateSet> sets, double temperature) {
  const double loss = srki::attention_loss(t.value(abar).data(), sets, temperature);
  Tensor out({1}, loss);
  if (!t.requires_grad(abar)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true,
                [abar, sets = std::move(sets), temperature](GradTape& tp, const Tensor& g) {
                  const auto a = tp.value(abar).data();
                  auto ga = tp.grad_buffer(abar).data();
                  const double w = g.data()[0] / (static_cast<double>(sets.size()) * temperature);
                  std::vector<double> z, p;
                  for (const auto& s : sets) {
                    z.assign(1, a[s.correct] / temperature);
                    for (std::size_t i : s.negatives) z.push_back(a[i] / temperature);
                    p.resize(z.size());
                    softmax_row_masked(z, nullptr, p);
                    ga[s.correct] += w * (p[0] - 1.0);
                    for (std::size_t j = 0; j < s.negatives.size(); ++j) {
                      ga[s.negatives[j]] += w * p[j + 1];
                    }
                  }
                });
}

}  // namespace ag

// ---- training loops ----------------------------------------------------------------

struct TrainResult {
  LossCurve curve;
};

// Called after every optimizer step with the step's losses.
using StepCallback = std::function<void(const LossPoint&)>;

namespace detail {

inline void check_finite_loss(double v, const char* stage, std::size_t step) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string(stage) + ": loss diverged (non-finite) at step " +
                       std::to_string(step));
  }
}

// One adapter-training run shared by stage 1 and stage 2. With
// `retrieval_layer` set, non-retrieval layers keep their own top-k_train and the
// retrieval layer adds the attention loss.
inline TrainResult train_adapters(const Backbone& bb, AdapterSet& adapters, const Tokenizer& tok,
                                  const std::vector<QaExample>& dataset, const KbStore& universe,
                                  const TrainConfig& cfg, std::optional<std::size_t> retrieval_layer,
                                  const char* stage, const StepCallback& on_step) {
  cfg.validate();
  adapters.validate(bb.config);
  const std::size_t layers = bb.config.layers;
  InjectionSchedule schedule = schedule_all(layers);
  if (retrieval_layer) {
    if (*retrieval_layer >= layers) throw ConfigError(std::string(stage) + ": retrieval layer out of range");
    for (std::size_t l = 0; l < layers; ++l) {
      if (l != *retrieval_layer) schedule[l] = SelectionRule::take_top_k(cfg.k_train);
    }
  }
  AdamW opt(cfg.weight_decay);
  TrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = sample_batch(dataset, universe, cfg.m_train, cfg.batch_size, cfg.mix,
                                     derive_seed(cfg.seed, step));
    GradTape t;
    const auto bv = bind_backbone(t, bb);
    const auto av = bind_adapters_trainable(t, adapters);
    const auto pool = bind_pool(t, batch.pool, av, bb.config.width);
    std::vector<Var> losses;
    double lm_sum = 0.0, la_sum = 0.0;
    std::size_t la_count = 0;
    for (const auto& ex : batch.examples) {
      const TokenizedExample te = tokenize_example(ex, tok);
      ForwardGraph g = forward_graph(t, bb.config, bv, av, pool, te.inputs, schedule);
      const Var lm = ag::cross_entropy(t, g.logits, te.targets, te.answer_mask);
      lm_sum += t.value(lm).data()[0];
      losses.push_back(lm);
      if (retrieval_layer && ex.qa_type != QaType::unanswerable) {
        const Var abar = g.abar[*retrieval_layer];
        const auto correct = ex.correct_indices();
        auto sets = select_hard_negatives(t.value(abar).data(), correct, cfg.k_train);
        const Var la = ag::attention_loss(t, abar, std::move(sets), cfg.temperature);
        la_sum += t.value(la).data()[0];
        ++la_count;
        losses.push_back(la);
      }
    }
    const double n = static_cast<double>(batch.examples.size());
    const Var total = ag::sum_scalars(t, losses, 1.0 / n);
    LossPoint point{step, lm_sum / n, la_count ? la_sum / static_cast<double>(la_count) : 0.0};
    check_finite_loss(t.value(total).data()[0], stage, step);
    t.backward(total);
    opt.step(t.parameter_grads(), scheduled_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_ratio));
    result.curve.push_back(point);
    if (on_step) on_step(point);
  }
  return result;
}

}  // namespace detail

// Adapter training with the language-modeling loss only; every layer sees the
// whole injected pool.
inline TrainResult stage1_train(const Backbone& bb, AdapterSet& adapters, const Tokenizer& tok,
                                const std::vector<QaExample>& dataset, const KbStore& universe,
                                const TrainConfig& cfg, const StepCallback& on_step = {}) {
  return detail::train_adapters(bb, adapters, tok, dataset, universe, cfg, std::nullopt, "stage1",
                                on_step);
}

// L_lm + L_a with hard negatives at the retrieval layer.
inline TrainResult stage2_train(const Backbone& bb, AdapterSet& adapters, std::size_t retrieval_layer,
                                const Tokenizer& tok, const std::vector<QaExample>& dataset,
                                const KbStore& universe, const TrainConfig& cfg,
                                const StepCallback& on_step = {}) {
  return detail::train_adapters(bb, adapters, tok, dataset, universe, cfg, retrieval_layer, "stage2",
                                on_step);
}

// ---- backbone pretraining (no KB) -------------------------------------------------------

struct PretrainConfig {
  double learning_rate = 3e-3;
  double warmup_ratio = 5e-2;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  bool lexical_init = true;  // seed token embeddings from the encoder's word features first
};

// The QA text with every object and id label replaced by a random one, so the
// backbone learns the answer format without memorizing any fact. Without a KB an
// unanswerable question looks like a single one, so it gets a random answer too.
inline QaExample scramble_answer(const QaExample& ex, Rng& rng, const VocabSpec& vocab,
                                 std::size_t id_length) {
  QaExample out = ex;
  out.answer.clear();
  const std::size_t n = std::max<std::size_t>(ex.factual_indices.size(), 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (j) out.answer += " and ";
    out.answer += object_name(rng.below(vocab.objects)) + " " + random_id_label(rng, id_length);
  }
  return out;
}

inline TrainResult pretrain_backbone(Backbone& bb, const Tokenizer& tok,
                                     const std::vector<QaExample>& dataset, const VocabSpec& vocab,
                                     std::size_t id_length, const PretrainConfig& cfg,
                                     const StepCallback& on_step = {}) {
  if (dataset.empty()) throw ConfigError("pretrain_backbone: empty dataset");
  if (cfg.batch_size < 1) throw ConfigError("pretrain_backbone: batch_size must be >= 1");
  const KbStore empty({}, KbOptions{bb.config.encoder_dim});
  AdapterSet dummy;
  for (std::size_t l = 0; l < bb.config.layers; ++l) {
    dummy.layers.push_back({Tensor::matrix(bb.config.width, bb.config.width),
                            Tensor::matrix(bb.config.encoder_dim, bb.config.width),
                            Tensor::matrix(bb.config.encoder_dim, bb.config.width)});
  }
  const InjectionSchedule schedule = schedule_all(bb.config.layers);
  AdamW opt(cfg.weight_decay);
  TrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, 0x57A6E0 + step));
    GradTape t;
    const auto bv = bind_backbone_trainable(t, bb);
    const auto av = bind_adapters(t, dummy);
    const auto pool = bind_pool(t, empty, av, bb.config.width);
    std::vector<Var> losses;
    double sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const QaExample ex = scramble_answer(dataset[rng.below(dataset.size())], rng, vocab, id_length);
      const TokenizedExample te = tokenize_example(ex, tok);
      ForwardGraph g = forward_graph(t, bb.config, bv, av, pool, te.inputs, schedule);
      const Var l = ag::cross_entropy(t, g.logits, te.targets,
                                      std::vector<bool>(te.targets.size(), true));
      sum += t.value(l).data()[0];
      losses.push_back(l);
    }
    const Var total = ag::sum_scalars(t, losses, 1.0 / static_cast<double>(cfg.batch_size));
    detail::check_finite_loss(t.value(total).data()[0], "stage0", step);
    t.backward(total);
    opt.step(t.parameter_grads(), scheduled_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_ratio));
    LossPoint p{step, sum / static_cast<double>(cfg.batch_size), 0.0};
    result.curve.push_back(p);
    if (on_step) on_step(p);
  }
  return result;
}

// ---- retrieval layer identification ----------------------------------------------------

struct LayerScore {
  std::size_t layer = 0;
  double id_accuracy = 0;
  double exact_match = 0;
  double score = 0;  // mean of the two
};

struct LayerIdentification {
  std::size_t layer = 0;
  std::vector<LayerScore> table;
};

// For each layer l, only l receives the example's correct entries (plus
// negatives); every other layer receives negatives only.
inline LayerIdentification identify_retrieval_layer(const Backbone& bb, const AdapterSet& adapters,
                                                    const Tokenizer& tok,
                                                    const std::vector<QaExample>& probe,
                                                    const KbStore& universe,
                                                    std::size_t num_negatives, std::uint64_t seed,
                                                    std::size_t max_new = 8) {
  const std::size_t layers = bb.config.layers;
  std::vector<const QaExample*> usable;
  for (const auto& ex : probe) {
    if (ex.qa_type != QaType::unanswerable) usable.push_back(&ex);
  }
  if (usable.empty()) throw ConfigError("identify_retrieval_layer: probe set has no answerable QA");
  LayerIdentification out;
  for (std::size_t l = 0; l < layers; ++l) {
    Rng rng(derive_seed(seed, 0x1D1D));  // same pools for every layer
    LayerScore s{l};
    for (const QaExample* ex : usable) {
      const auto correct = ex->correct_indices();
      auto [pool, source] = make_pool(universe, correct, correct.size() + num_negatives, rng, true);
      const QaExample local = remap_example(*ex, source, pool);
      const auto local_correct = local.correct_indices();
      const std::set<std::size_t> c(local_correct.begin(), local_correct.end());
      IndexList negatives;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!c.count(i)) negatives.push_back(i);
      }
      IndexList full(pool.size());
      std::iota(full.begin(), full.end(), std::size_t{0});
      InjectionSchedule schedule;
      for (std::size_t j = 0; j < layers; ++j) {
        schedule.push_back(SelectionRule::take_fixed(j == l ? full : negatives));
      }
      const TokenizedExample te = tokenize_example(local, tok);
      const DecodeResult r = decode_with_schedule(bb, adapters, pool, tok, te.prompt, max_new, schedule);
      std::vector<std::string> ids, objects;
      for (std::size_t j = 0; j < local.factual_indices.size(); ++j) {
        objects.push_back(pool[local.factual_indices[j]].triple.object);
        ids.push_back(*pool[local.reference_indices[j]].id_label);
      }
      s.id_accuracy += id_accuracy(r.text, ids);
      s.exact_match += exact_match(r.text, objects);
    }
    const double n = static_cast<double>(usable.size());
    s.id_accuracy /= n;
    s.exact_match /= n;
    s.score = 0.5 * (s.id_accuracy + s.exact_match);
    out.table.push_back(s);
  }
  for (const auto& s : out.table) {
    if (s.score > out.table[out.layer].score) out.layer = s.layer;
  }
  return out;
}

inline nlohmann::json to_json(const LayerIdentification& li) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : li.table) {
    rows.push_back({{"layer", s.layer},
                    {"id_accuracy", s.id_accuracy},
                    {"exact_match", s.exact_match},
                    {"score", s.score}});
  }
  return {{"retrieval_layer", li.layer}, {"layers", rows}};
}

}  // namespace srki
