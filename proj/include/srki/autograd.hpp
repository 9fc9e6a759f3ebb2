#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "srki/attention.hpp"
#include "srki/tensor.hpp"

namespace srki {

class GradTape;

// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

struct ParamGrad {
  Tensor* param;
  Tensor grad;
};

// Records primitive ops in execution order. Only tensors registered through
// parameter() receive gradients; constants and everything derived solely from
// constants are skipped during backward.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const Tensor& out_grad)>;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  Var parameter(Tensor& param) {
    Tensor copy = param;
    copy.requires_grad = true;
    Var v = push(std::move(copy), true, nullptr);
    params_.push_back({v, &param});
    return v;
  }

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    value.requires_grad = requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  template <typename... Vs>
  bool any_requires_grad(Vs... vs) const {
    return (requires_grad(vs) || ...);
  }

  // Gradient buffer for v, zero-initialized on first access.
  Tensor& grad_buffer(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  Tensor* grad_if_needed(Var v) { return requires_grad(v) ? &grad_buffer(v) : nullptr; }

  const Tensor& grad(Var v) { return grad_buffer(v); }

  void backward(Var loss) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw DimensionError("backward: loss must be a scalar");
    if (!std::isfinite(lv.data()[0])) throw NumericError("backward: non-finite loss");
    if (!requires_grad(loss)) return;
    grad_buffer(loss).data()[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  // Gradient for every registered parameter, in registration order.
  std::vector<ParamGrad> parameter_grads() {
    std::vector<ParamGrad> out;
    out.reserve(params_.size());
    for (auto& [var, ptr] : params_) out.push_back({ptr, grad_buffer(var)});
    return out;
  }

  std::size_t parameter_count() const { return params_.size(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    BackwardFn backward;
  };
  struct Registered {
    Var var;
    Tensor* param;
  };

  std::vector<Node> nodes_;
  std::vector<Registered> params_;
};

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// tanh-approximated GELU, elementwise.
inline Tensor gelu_values(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  }
  return out;
}

// Parameter-free RMS normalization of each row; optionally reports 1/rms.
inline Tensor rms_norm_values(const Tensor& x, std::vector<double>* inv_out = nullptr,
                              double eps = 1e-6) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out(x.shape());
  if (inv_out) inv_out->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (double v : x.row(i)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    if (inv_out) (*inv_out)[i] = inv;
    for (std::size_t j = 0; j < d; ++j) out(i, j) = x(i, j) * inv;
  }
  return out;
}

namespace ag {

inline Var matmul(GradTape& t, Var a, Var b) {
  Tensor out = srki::matmul(t.value(a), t.value(b));
  if (!t.any_requires_grad(a, b)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, b](GradTape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_if_needed(a)) add_inplace(*ga, matmul_bt(g, tp.value(b)));
    if (Tensor* gb = tp.grad_if_needed(b)) add_inplace(*gb, matmul_at(tp.value(a), g));
  });
}

inline Var add(GradTape& t, Var a, Var b) {
  Tensor out = t.value(a);
  add_inplace(out, t.value(b));
  if (!t.any_requires_grad(a, b)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, b](GradTape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_if_needed(a)) add_inplace(*ga, g);
    if (Tensor* gb = tp.grad_if_needed(b)) add_inplace(*gb, g);
  });
}

inline Var scale(GradTape& t, Var a, double s) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v *= s;
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a, s](GradTape& tp, const Tensor& g) {
    add_inplace(tp.grad_buffer(a), g, s);
  });
}

// Sum of scalars (each 1-element tensor), multiplied by `weight`.
inline Var sum_scalars(GradTape& t, const std::vector<Var>& xs, double weight = 1.0) {
  double s = 0.0;
  bool rg = false;
  for (Var x : xs) {
    if (t.value(x).size() != 1) throw DimensionError("sum_scalars: non-scalar input");
    s += t.value(x).data()[0];
    rg = rg || t.requires_grad(x);
  }
  Tensor out({1}, s * weight);
  if (!rg) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [xs, weight](GradTape& tp, const Tensor& g) {
    for (Var x : xs) {
      if (Tensor* gx = tp.grad_if_needed(x)) gx->data()[0] += weight * g.data()[0];
    }
  });
}

inline Var gelu(GradTape& t, Var a) {
  Tensor out = gelu_values(t.value(a));
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [a](GradTape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double th = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      ga.data()[i] += g.data()[i] * d;
    }
  });
}

inline Var rms_norm(GradTape& t, Var a) {
  std::vector<double> inv;
  Tensor out = rms_norm_values(t.value(a), &inv);
  if (!t.requires_grad(a)) return t.push(std::move(out), false, nullptr);
  Tensor y = out;
  return t.push(std::move(out), true,
                [a, inv = std::move(inv), y = std::move(y)](GradTape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad_buffer(a);
                  const std::size_t n = y.rows(), d = y.cols();
                  for (std::size_t i = 0; i < n; ++i) {
                    double gy = 0.0;
                    for (std::size_t j = 0; j < d; ++j) gy += g(i, j) * y(i, j);
                    gy /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      ga(i, j) += inv[i] * (g(i, j) - y(i, j) * gy);
                    }
                  }
                });
}

inline Var gather_rows(GradTape& t, Var src, std::vector<std::size_t> idx) {
  Tensor out = srki::gather_rows(t.value(src), idx);
  if (!t.requires_grad(src)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [src, idx = std::move(idx)](GradTape& tp, const Tensor& g) {
    Tensor& gs = tp.grad_buffer(src);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = gs.row(idx[r]);
      auto row = g.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) dst[j] += row[j];
    }
  });
}

inline Var head_logits(GradTape& t, Var queries, Var keys, HeadLayout layout) {
  Tensor out = srki::head_logits(t.value(queries), t.value(keys), layout);
  if (!t.any_requires_grad(queries, keys)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [queries, keys, layout](GradTape& tp, const Tensor& g) {
    head_logits_backward(tp.value(queries), tp.value(keys), g, layout,
                         tp.grad_if_needed(queries), tp.grad_if_needed(keys));
  });
}

inline Var attend(GradTape& t, Var kb_logits, Var token_logits, Var kb_values, Var token_values,
                  HeadLayout layout, bool causal) {
  AttendResult r = srki::attend(t.value(kb_logits), t.value(token_logits), t.value(kb_values),
                                t.value(token_values), layout, causal);
  if (!t.any_requires_grad(kb_logits, token_logits, kb_values, token_values)) {
    return t.push(std::move(r.output), false, nullptr);
  }
  return t.push(std::move(r.output), true,
                [=, probs = std::move(r.probabilities)](GradTape& tp, const Tensor& g) {
                  attend_backward(probs, tp.value(kb_values), tp.value(token_values), g, layout,
                                  tp.grad_if_needed(kb_logits), tp.grad_if_needed(token_logits),
                                  tp.grad_if_needed(kb_values), tp.grad_if_needed(token_values));
                });
}

// Mean over heads and query rows of H x N x M logits -> 1 x M.
inline Tensor mean_heads_queries(const Tensor& logits) {
  logits.require_rank(3);
  const std::size_t h = logits.shape()[0], n = logits.shape()[1], m = logits.shape()[2];
  if (n == 0) throw DegenerateError("aggregate: no query rows");
  Tensor out = Tensor::matrix(1, m);
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = logits.data().data() + (hh * n + i) * m;
      for (std::size_t j = 0; j < m; ++j) out(0, j) += row[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(h * n);
  for (double& v : out.data()) v *= inv;
  return out;
}

inline Var mean_heads_queries(GradTape& t, Var logits) {
  Tensor out = mean_heads_queries(t.value(logits));
  if (!t.requires_grad(logits)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true, [logits](GradTape& tp, const Tensor& g) {
    Tensor& gl = tp.grad_buffer(logits);
    const std::size_t h = gl.shape()[0], n = gl.shape()[1], m = gl.shape()[2];
    const double inv = 1.0 / static_cast<double>(h * n);
    for (std::size_t r = 0; r < h * n; ++r) {
      double* row = gl.data().data() + r * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += inv * g.data()[j];
    }
  });
}

inline Var cross_entropy(GradTape& t, Var logits, std::vector<std::size_t> targets,
                         std::vector<bool> mask) {
  const double loss = srki::cross_entropy(t.value(logits), targets, mask);
  Tensor out({1}, loss);
  if (!t.requires_grad(logits)) return t.push(std::move(out), false, nullptr);
  return t.push(std::move(out), true,
                [logits, targets = std::move(targets), mask = std::move(mask)](GradTape& tp,
                                                                                const Tensor& g) {
                  const Tensor& x = tp.value(logits);
                  Tensor& gx = tp.grad_buffer(logits);
                  std::size_t count = 0;
                  for (bool b : mask) count += b ? 1 : 0;
                  const double w = g.data()[0] / static_cast<double>(count);
                  std::vector<double> p(x.cols());
                  for (std::size_t i = 0; i < x.rows(); ++i) {
                    if (!mask[i]) continue;
                    softmax_row_masked(x.row(i), nullptr, p);
                    auto gr = gx.row(i);
                    for (std::size_t j = 0; j < p.size(); ++j) gr[j] += w * p[j];
                    gr[targets[i]] -= w;
                  }
                });
}

}  // namespace ag
}  // namespace srki
