#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "srki/tensor.hpp"

namespace srki {

// Per-head slicing of a width-D hidden vector into `heads` contiguous slices.
struct HeadLayout {
  std::size_t width = 0;
  std::size_t heads = 1;

  HeadLayout(std::size_t width_, std::size_t heads_) : width(width_), heads(heads_) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("model width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }
  std::size_t head_dim() const { return width / heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// Scaled per-head logits: out[h, n, m] = <queries[n, h], keys[m, h]> / sqrt(D/H).
inline Tensor head_logits(const Tensor& queries, const Tensor& keys, const HeadLayout& layout) {
  queries.require_rank(2);
  keys.require_rank(2);
  if (queries.cols() != layout.width || keys.cols() != layout.width) {
    throw DimensionError("head_logits: width mismatch " + shape_string(queries.shape()) + " vs " +
                         shape_string(keys.shape()));
  }
  const std::size_t n = queries.rows(), m = keys.rows(), dh = layout.head_dim();
  const double scale = layout.scale();
  Tensor out({layout.heads, n, m});
  for (std::size_t h = 0; h < layout.heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* q = queries.data().data() + i * layout.width + h * dh;
      double* orow = out.data().data() + (h * n + i) * m;
      for (std::size_t j = 0; j < m; ++j) {
        orow[j] = scale * detail::dot(q, keys.data().data() + j * layout.width + h * dh, dh);
      }
    }
  }
  return out;
}

// Gradient of head_logits with respect to queries and keys, accumulated.
inline void head_logits_backward(const Tensor& queries, const Tensor& keys,
                                 const Tensor& grad_logits, const HeadLayout& layout,
                                 Tensor* grad_queries, Tensor* grad_keys) {
  const std::size_t n = queries.rows(), m = keys.rows(), dh = layout.head_dim();
  const std::size_t w = layout.width;
  const double scale = layout.scale();
  for (std::size_t h = 0; h < layout.heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* g = grad_logits.data().data() + (h * n + i) * m;
      const double* q = queries.data().data() + i * w + h * dh;
      double* gq = grad_queries ? grad_queries->data().data() + i * w + h * dh : nullptr;
      for (std::size_t j = 0; j < m; ++j) {
        const double gs = g[j] * scale;
        if (gs == 0.0) continue;
        if (gq) detail::axpy(gs, keys.data().data() + j * w + h * dh, gq, dh);
        if (grad_keys) detail::axpy(gs, q, grad_keys->data().data() + j * w + h * dh, dh);
      }
    }
  }
}

// Unified softmax over [kb block | token block] per (head, query) row, followed
// by the weighted sum over [kb_values; token_values].
//
// Query row i sits at absolute position (query_offset + i); with `causal`, token
// key j is visible iff j <= query_offset + i. KB entries are visible to all rows.
struct AttendResult {
  Tensor output;         // N x D
  Tensor probabilities;  // H x N x (M + Nk)
};

inline AttendResult attend(const Tensor& kb_logits, const Tensor& token_logits,
                           const Tensor& kb_values, const Tensor& token_values,
                           const HeadLayout& layout, bool causal, std::size_t query_offset = 0) {
  kb_logits.require_rank(3);
  token_logits.require_rank(3);
  const std::size_t heads = layout.heads, dh = layout.head_dim(), w = layout.width;
  const std::size_t n = token_logits.shape()[1];
  const std::size_t nk = token_logits.shape()[2];
  const std::size_t m = kb_logits.shape()[2];
  if (kb_logits.shape()[0] != heads || token_logits.shape()[0] != heads ||
      kb_logits.shape()[1] != n) {
    throw DimensionError("attend: logits " + shape_string(kb_logits.shape()) + " / " +
                         shape_string(token_logits.shape()));
  }
  if (kb_values.rows() != m || token_values.rows() != nk || kb_values.cols() != w ||
      token_values.cols() != w) {
    throw DimensionError("attend: values " + shape_string(kb_values.shape()) + " / " +
                         shape_string(token_values.shape()));
  }
  AttendResult r{Tensor::matrix(n, w), Tensor({heads, n, m + nk})};
  std::vector<double> row(m + nk);
  Mask visible(m + nk, 1);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* kl = kb_logits.data().data() + (h * n + i) * m;
      const double* tl = token_logits.data().data() + (h * n + i) * nk;
      std::copy(kl, kl + m, row.begin());
      std::copy(tl, tl + nk, row.begin() + static_cast<std::ptrdiff_t>(m));
      for (std::size_t j = 0; j < nk; ++j) visible[m + j] = !causal || j <= query_offset + i;
      auto p = r.probabilities.data().subspan((h * n + i) * (m + nk), m + nk);
      softmax_row_masked(row, visible.data(), p);
      double* o = r.output.data().data() + i * w + h * dh;
      for (std::size_t j = 0; j < m; ++j) {
        if (p[j] != 0.0) detail::axpy(p[j], kb_values.data().data() + j * w + h * dh, o, dh);
      }
      for (std::size_t j = 0; j < nk; ++j) {
        if (p[m + j] != 0.0) {
          detail::axpy(p[m + j], token_values.data().data() + j * w + h * dh, o, dh);
        }
      }
    }
  }
  return r;
}

// Accumulates gradients of attend() into the provided (nullable) tensors.
inline void attend_backward(const Tensor& probabilities, const Tensor& kb_values,
                            const Tensor& token_values, const Tensor& grad_output,
                            const HeadLayout& layout, Tensor* grad_kb_logits,
                            Tensor* grad_token_logits, Tensor* grad_kb_values,
                            Tensor* grad_token_values) {
  const std::size_t heads = layout.heads, dh = layout.head_dim(), w = layout.width;
  const std::size_t n = probabilities.shape()[1];
  const std::size_t total = probabilities.shape()[2];
  const std::size_t m = kb_values.rows();
  const std::size_t nk = total - m;
  std::vector<double> dp(total);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = probabilities.data().data() + (h * n + i) * total;
      const double* go = grad_output.data().data() + i * w + h * dh;
      double s = 0.0;
      for (std::size_t j = 0; j < total; ++j) {
        if (p[j] == 0.0) {
          dp[j] = 0.0;
          continue;
        }
        const double* val = j < m ? kb_values.data().data() + j * w + h * dh
                                  : token_values.data().data() + (j - m) * w + h * dh;
        dp[j] = detail::dot(go, val, dh);
        s += p[j] * dp[j];
        if (j < m) {
          if (grad_kb_values) detail::axpy(p[j], go, grad_kb_values->data().data() + j * w + h * dh, dh);
        } else if (grad_token_values) {
          detail::axpy(p[j], go, grad_token_values->data().data() + (j - m) * w + h * dh, dh);
        }
      }
      if (grad_kb_logits) {
        double* g = grad_kb_logits->data().data() + (h * n + i) * m;
        for (std::size_t j = 0; j < m; ++j) g[j] += p[j] * (dp[j] - s);
      }
      if (grad_token_logits) {
        double* g = grad_token_logits->data().data() + (h * n + i) * nk;
        for (std::size_t j = 0; j < nk; ++j) g[j] += p[m + j] * (dp[m + j] - s);
      }
    }
  }
}

struct RectangularAttentionResult {
  Tensor output;     // N x D
  Tensor kb_logits;  // H x N x M, pre-softmax
};

// Token queries attend token keys; KB queries (from the query adapter) attend
// the projected KB keys; both logit blocks share one softmax per row.
// M = 0 reduces to ordinary causal multi-head attention.
inline RectangularAttentionResult rectangular_attention(const Tensor& queries,
                                                        const Tensor& kb_queries,
                                                        const Tensor& token_keys,
                                                        const Tensor& token_values,
                                                        const Tensor& kb_keys,
                                                        const Tensor& kb_values,
                                                        std::size_t heads, bool causal) {
  const HeadLayout layout(queries.cols(), heads);
  require_same_shape(queries, kb_queries, "rectangular_attention: queries");
  require_same_shape(token_keys, token_values, "rectangular_attention: token keys/values");
  require_same_shape(kb_keys, kb_values, "rectangular_attention: kb keys/values");
  Tensor kb_logits = head_logits(kb_queries, kb_keys, layout);
  const Tensor tok_logits = head_logits(queries, token_keys, layout);
  AttendResult a = attend(kb_logits, tok_logits, kb_values, token_values, layout, causal);
  return {std::move(a.output), std::move(kb_logits)};
}

}  // namespace srki
