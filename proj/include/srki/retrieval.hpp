#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "srki/attention.hpp"
#include "srki/autograd.hpp"
#include "srki/errors.hpp"
#include "srki/rng.hpp"
#include "srki/tensor.hpp"

namespace srki {

using IndexList = std::vector<std::size_t>;

enum class CompressionMode { none, per_layer, reuse, reuse_maxpool, random_pre_retrieval };

inline std::string to_string(CompressionMode m) {
  switch (m) {
    case CompressionMode::none: return "none";
    case CompressionMode::per_layer: return "per_layer";
    case CompressionMode::reuse: return "reuse";
    case CompressionMode::reuse_maxpool: return "reuse_maxpool";
    case CompressionMode::random_pre_retrieval: return "random_pre_retrieval";
  }
  return "?";
}

inline CompressionMode compression_mode_from_string(const std::string& s) {
  for (auto m : {CompressionMode::none, CompressionMode::per_layer, CompressionMode::reuse,
                 CompressionMode::reuse_maxpool, CompressionMode::random_pre_retrieval}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown compression mode '" + s + "'");
}

struct CompressionPolicy {
  CompressionMode mode = CompressionMode::none;
  std::size_t k = 100;
  std::size_t retrieval_layer = 0;
  std::size_t maxpool_kernel = 7;

  void validate(std::size_t layers) const {
    if (k < 1) throw ConfigError("CompressionPolicy: k must be >= 1");
    if (retrieval_layer >= layers) {
      throw ConfigError("CompressionPolicy: retrieval layer " + std::to_string(retrieval_layer) +
                        " outside [0, " + std::to_string(layers) + ")");
    }
    if (maxpool_kernel < 1 || maxpool_kernel % 2 == 0) {
      throw ConfigError("CompressionPolicy: max-pool kernel must be odd and >= 1");
    }
  }
};

// Per-layer KB indices to inject, each list ordered by descending selection score
// (or sampling order for random layers).
struct CompressionPlan {
  std::vector<IndexList> layers;

  void validate(std::size_t pool_size) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<char> seen(pool_size, 0);
      for (std::size_t i : layers[l]) {
        if (i >= pool_size) {
          throw DimensionError("plan: layer " + std::to_string(l) + " references KB index " +
                               std::to_string(i) + " but pool has " + std::to_string(pool_size));
        }
        if (seen[i]) throw DimensionError("plan: duplicate index at layer " + std::to_string(l));
        seen[i] = 1;
      }
    }
  }

  static CompressionPlan all(std::size_t layers, std::size_t pool_size) {
    IndexList idx(pool_size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return CompressionPlan{std::vector<IndexList>(layers, idx)};
  }

  friend bool operator==(const CompressionPlan&, const CompressionPlan&) = default;
};

// Ā[m] = mean over heads and query positions of the pre-softmax KB logits.
inline std::vector<double> aggregate_kb_attention(const Tensor& kb_logits) {
  return ag::mean_heads_queries(kb_logits).values();
}

// Indices of the k largest scores, highest first; ties go to the lower index.
inline IndexList topk_indices(std::span<const double> scores, std::size_t k) {
  if (k < 1) throw ConfigError("topk_indices: k must be >= 1");
  IndexList idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t kk = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), better);
  idx.resize(kk);
  return idx;
}

// Sliding max with stride 1; windows are clipped at the boundaries.
inline std::vector<double> sliding_max(std::span<const double> x, std::size_t kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("sliding_max: kernel must be odd");
  const std::size_t r = kernel / 2;
  std::vector<double> out(x.size());
  for (std::size_t m = 0; m < x.size(); ++m) {
    const std::size_t lo = m >= r ? m - r : 0;
    const std::size_t hi = std::min(x.size() - 1, m + r);
    out[m] = *std::max_element(x.begin() + static_cast<std::ptrdiff_t>(lo),
                               x.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
  }
  return out;
}

// Softmax over the KB axis per (head, query) row, summed over heads and
// queries, then max-pooled along the KB axis.
inline std::vector<double> maxpool_aggregate(const Tensor& kb_logits, std::size_t kernel) {
  kb_logits.require_rank(3);
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("maxpool_aggregate: kernel must be odd");
  const std::size_t rows = kb_logits.shape()[0] * kb_logits.shape()[1];
  const std::size_t m = kb_logits.shape()[2];
  std::vector<double> summed(m, 0.0), p(m);
  if (m == 0) return summed;
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row_masked(kb_logits.data().subspan(r * m, m), nullptr, p);
    for (std::size_t j = 0; j < m; ++j) summed[j] += p[j];
  }
  return sliding_max(summed, kernel);
}

enum class Scoring { mean_logit, maxpool };

// Full-pool selection scores computed chunk by chunk over the KB axis, so the
// largest logit block held at once is H x N x chunk. Results are bitwise
// identical to aggregating the full logit tensor.
inline std::vector<double> streamed_pool_scores(const Tensor& kb_queries, const Tensor& key_embeddings,
                                                const Tensor& key_adapter, const HeadLayout& layout,
                                                Scoring scoring, std::size_t kernel,
                                                std::size_t chunk) {
  const std::size_t m = key_embeddings.rows();
  const std::size_t n = kb_queries.rows();
  if (chunk == 0) chunk = std::max<std::size_t>(m, 1);
  std::vector<double> scores(m, 0.0);
  if (m == 0) return scores;
  auto chunk_logits = [&](std::size_t begin, std::size_t end) {
    IndexList idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return head_logits(kb_queries, matmul(gather_rows(key_embeddings, idx), key_adapter), layout);
  };
  const std::size_t rows = layout.heads * n;
  if (scoring == Scoring::mean_logit) {
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t b = 0; b < m; b += chunk) {
      const std::size_t e = std::min(m, b + chunk);
      const Tensor lg = chunk_logits(b, e);
      const std::size_t c = e - b;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) scores[b + j] += lg.data()[r * c + j];
      }
    }
    for (double& s : scores) s *= inv;
    return scores;
  }
  std::vector<double> mx(rows, -std::numeric_limits<double>::infinity()), sum(rows, 0.0);
  for (std::size_t b = 0; b < m; b += chunk) {
    const std::size_t e = std::min(m, b + chunk);
    const Tensor lg = chunk_logits(b, e);
    const std::size_t c = e - b;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) mx[r] = std::max(mx[r], lg.data()[r * c + j]);
    }
  }
  for (std::size_t b = 0; b < m; b += chunk) {
    const std::size_t e = std::min(m, b + chunk);
    const Tensor lg = chunk_logits(b, e);
    const std::size_t c = e - b;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) sum[r] += std::exp(lg.data()[r * c + j] - mx[r]);
    }
  }
  for (std::size_t b = 0; b < m; b += chunk) {
    const std::size_t e = std::min(m, b + chunk);
    const Tensor lg = chunk_logits(b, e);
    const std::size_t c = e - b;
    for (std::size_t r = 0; r < rows; ++r) {
      const double inv = 1.0 / sum[r];
      for (std::size_t j = 0; j < c; ++j) {
        scores[b + j] += std::exp(lg.data()[r * c + j] - mx[r]) * inv;
      }
    }
  }
  return sliding_max(scores, kernel);
}

// How one layer's injected KB list is obtained.
struct SelectionRule {
  enum class Kind { all, fixed, top_k, reuse };
  Kind kind = Kind::all;
  std::size_t k = 0;
  Scoring scoring = Scoring::mean_logit;
  std::size_t kernel = 1;
  IndexList fixed;
  std::size_t source_layer = 0;

  static SelectionRule take_all() { return {}; }
  static SelectionRule take_fixed(IndexList idx) {
    SelectionRule r;
    r.kind = Kind::fixed;
    r.fixed = std::move(idx);
    return r;
  }
  static SelectionRule take_top_k(std::size_t k, Scoring s = Scoring::mean_logit,
                                  std::size_t kernel = 1) {
    SelectionRule r;
    r.kind = Kind::top_k;
    r.k = k;
    r.scoring = s;
    r.kernel = kernel;
    return r;
  }
  static SelectionRule reuse_from(std::size_t layer) {
    SelectionRule r;
    r.kind = Kind::reuse;
    r.source_layer = layer;
    return r;
  }

  bool needs_scores() const { return kind == Kind::top_k; }
};

using InjectionSchedule = std::vector<SelectionRule>;

inline InjectionSchedule schedule_all(std::size_t layers) {
  return InjectionSchedule(layers, SelectionRule::take_all());
}

inline InjectionSchedule schedule_from_plan(const CompressionPlan& plan) {
  InjectionSchedule s;
  for (const auto& l : plan.layers) s.push_back(SelectionRule::take_fixed(l));
  return s;
}

// Random layers draw min(k, M) indices from one generator, lowest layer first.
inline InjectionSchedule schedule_from_policy(const CompressionPolicy& policy, std::size_t layers,
                                              std::size_t pool_size, std::uint64_t seed) {
  policy.validate(layers);
  InjectionSchedule s;
  const std::size_t r = policy.retrieval_layer;
  Rng rng(derive_seed(seed, 0xA11CE));
  for (std::size_t l = 0; l < layers; ++l) {
    switch (policy.mode) {
      case CompressionMode::none:
        s.push_back(SelectionRule::take_all());
        break;
      case CompressionMode::per_layer:
        s.push_back(SelectionRule::take_top_k(policy.k));
        break;
      case CompressionMode::reuse:
        s.push_back(l <= r ? SelectionRule::take_top_k(policy.k) : SelectionRule::reuse_from(r));
        break;
      case CompressionMode::reuse_maxpool:
        s.push_back(l <= r ? SelectionRule::take_top_k(policy.k, Scoring::maxpool,
                                                       policy.maxpool_kernel)
                           : SelectionRule::reuse_from(r));
        break;
      case CompressionMode::random_pre_retrieval:
        if (l < r) {
          s.push_back(SelectionRule::take_fixed(
              rng.sample_without_replacement(pool_size, std::min(policy.k, pool_size))));
        } else {
          s.push_back(l == r ? SelectionRule::take_top_k(policy.k) : SelectionRule::reuse_from(r));
        }
        break;
    }
  }
  return s;
}

// Resolves a layer's index list. `scores` is consulted only by top-k rules;
// `earlier` holds the lists already resolved for lower layers.
inline IndexList resolve_rule(const SelectionRule& rule, std::span<const double> scores,
                              std::size_t pool_size, const std::vector<IndexList>& earlier) {
  switch (rule.kind) {
    case SelectionRule::Kind::all: {
      IndexList idx(pool_size);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      return idx;
    }
    case SelectionRule::Kind::fixed:
      for (std::size_t i : rule.fixed) {
        if (i >= pool_size) {
          throw DimensionError("selection references KB index " + std::to_string(i) +
                               " but pool has " + std::to_string(pool_size));
        }
      }
      return rule.fixed;
    case SelectionRule::Kind::top_k:
      if (scores.size() != pool_size) {
        throw DimensionError("top-k selection needs one score per pool entry");
      }
      return topk_indices(scores, rule.k);
    case SelectionRule::Kind::reuse:
      if (rule.source_layer >= earlier.size()) {
        throw ConfigError("reuse source layer " + std::to_string(rule.source_layer) +
                          " not resolved yet");
      }
      return earlier[rule.source_layer];
  }
  return {};
}

// Builds a plan from per-layer selection scores. For reuse_maxpool the caller
// supplies max-pooled scores; entries for layers that do not select by score
// may be empty.
inline CompressionPlan build_plan(const std::vector<std::vector<double>>& per_layer_scores,
                                  const CompressionPolicy& policy, std::uint64_t seed) {
  const std::size_t layers = per_layer_scores.size();
  if (layers == 0) throw ConfigError("build_plan: no layers");
  if (policy.retrieval_layer >= layers) {
    throw ConfigError("build_plan: retrieval layer " + std::to_string(policy.retrieval_layer) +
                      " but only " + std::to_string(layers) + " layers of scores");
  }
  std::size_t pool = 0;
  for (const auto& s : per_layer_scores) pool = std::max(pool, s.size());
  const InjectionSchedule schedule = schedule_from_policy(policy, layers, pool, seed);
  CompressionPlan plan;
  for (std::size_t l = 0; l < layers; ++l) {
    plan.layers.push_back(resolve_rule(schedule[l], per_layer_scores[l], pool, plan.layers));
  }
  return plan;
}

inline double compression_ratio(std::size_t pool_size, std::size_t k) {
  if (pool_size == 0) throw ConfigError("compression_ratio: empty pool");
  if (k > pool_size) throw ConfigError("compression_ratio: k exceeds pool size");
  return static_cast<double>(pool_size - k) / static_cast<double>(pool_size);
}

}  // namespace srki
