#pragma once

// Minimal reverse-mode differentiation over dense matrices. Every value in
// the model is a 2-D Matrix; sequence and batch axes are folded into rows
// with the layout stated at each call site. Ops record a closure that
// accumulates gradients into their parents; `backward` walks the graph in
// reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "mbrain/matrix.hpp"

namespace mbrain::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Matrix& ensure_grad() {
    if (grad.rows != value.rows || grad.cols != value.cols) grad = Matrix(value.rows, value.cols);
    return grad;
  }
  void zero_grad() { grad = Matrix(value.rows, value.cols); }
  std::size_t rows() const { return value.rows; }
  std::size_t cols() const { return value.cols; }
};

inline Var constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  return n;
}

inline Var parameter(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  n->requires_grad = true;
  n->zero_grad();
  return n;
}

inline Var scalar(double v) { return constant(Matrix(1, 1, v)); }

/// Optional record of every branch taken by a non-smooth op (ReLU sign,
/// graph threshold). Finite-difference checks compare traces to tell when a
/// step crosses a kink. Null when nobody is listening.
struct BranchTrace {
  std::vector<std::uint8_t> bits;
};
inline thread_local BranchTrace* branch_trace = nullptr;

inline void record_branch(bool taken) {
  if (branch_trace) branch_trace->bits.push_back(taken ? 1 : 0);
}

namespace detail {

inline Var make(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool any = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

inline void check_same(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

/// Runs reverse accumulation from a 1x1 loss.
inline void backward(const Var& loss) {
  if (loss->rows() != 1 || loss->cols() != 1) throw ShapeError("backward: loss must be 1x1");
  if (!loss->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---- linear algebra -------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows())
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a->value) + " x " + shape_str(b->value));
  Matrix out(a->rows(), b->cols());
  as_eigen(out).noalias() = as_eigen(a->value) * as_eigen(b->value);
  return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) as_eigen(a->ensure_grad()).noalias() += as_eigen(self.grad) * as_eigen(b->value).transpose();
    if (b->requires_grad) as_eigen(b->ensure_grad()).noalias() += as_eigen(a->value).transpose() * as_eigen(self.grad);
  });
}

inline Var transpose(const Var& a) {
  return detail::make(a->value.transposed(), {a}, [a](Node& self) {
    as_eigen(a->ensure_grad()) += as_eigen(self.grad).transpose();
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a->value, b->value, "add");
  Matrix out = a->value;
  as_eigen(out) += as_eigen(b->value);
  return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) as_eigen(a->ensure_grad()) += as_eigen(self.grad);
    if (b->requires_grad) as_eigen(b->ensure_grad()) += as_eigen(self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same(a->value, b->value, "sub");
  Matrix out = a->value;
  as_eigen(out) -= as_eigen(b->value);
  return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) as_eigen(a->ensure_grad()) += as_eigen(self.grad);
    if (b->requires_grad) as_eigen(b->ensure_grad()) -= as_eigen(self.grad);
  });
}

inline Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty input");
  Matrix out = xs.front()->value;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::check_same(out, xs[i]->value, "add_n");
    as_eigen(out) += as_eigen(xs[i]->value);
  }
  return detail::make(std::move(out), xs, [xs](Node& self) {
    for (const auto& x : xs)
      if (x->requires_grad) as_eigen(x->ensure_grad()) += as_eigen(self.grad);
  });
}

/// a + broadcast(bias) where bias is 1 x cols.
inline Var add_row(const Var& a, const Var& bias) {
  if (bias->rows() != 1 || bias->cols() != a->cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix out = a->value;
  as_eigen(out).rowwise() += as_eigen(bias->value).row(0);
  return detail::make(std::move(out), {a, bias}, [a, bias](Node& self) {
    if (a->requires_grad) as_eigen(a->ensure_grad()) += as_eigen(self.grad);
    if (bias->requires_grad) as_eigen(bias->ensure_grad()).row(0) += as_eigen(self.grad).colwise().sum();
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a->value, b->value, "mul");
  Matrix out(a->rows(), a->cols());
  as_eigen(out) = as_eigen(a->value).cwiseProduct(as_eigen(b->value));
  return detail::make(std::move(out), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) as_eigen(a->ensure_grad()) += as_eigen(self.grad).cwiseProduct(as_eigen(b->value));
    if (b->requires_grad) as_eigen(b->ensure_grad()) += as_eigen(self.grad).cwiseProduct(as_eigen(a->value));
  });
}

inline Var scale(const Var& a, double s) {
  Matrix out = a->value;
  as_eigen(out) *= s;
  return detail::make(std::move(out), {a}, [a, s](Node& self) { as_eigen(a->ensure_grad()) += s * as_eigen(self.grad); });
}

inline Var sum_all(const Var& a) {
  Matrix out(1, 1, as_eigen(a->value).sum());
  return detail::make(std::move(out), {a}, [a](Node& self) {
    as_eigen(a->ensure_grad()).array() += self.grad.data[0];
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

// ---- pointwise nonlinearities ---------------------------------------------

namespace detail {
template <typename F, typename D>
Var pointwise(const Var& a, F f, D dfdx_from_y_x) {
  Matrix out(a->rows(), a->cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(a->value.data[i]);
  return make(std::move(out), {a}, [a, dfdx_from_y_x](Node& self) {
    Matrix& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g.data[i] += self.grad.data[i] * dfdx_from_y_x(self.value.data[i], a->value.data[i]);
  });
}
}  // namespace detail

inline Var relu(const Var& a) {
  if (branch_trace)
    for (double x : a->value.data) record_branch(x > 0);
  return detail::pointwise(a, [](double x) { return x > 0 ? x : 0.0; }, [](double, double x) { return x > 0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::pointwise(a, detail::sigmoid, [](double y, double) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::pointwise(a, [](double x) { return std::tanh(x); }, [](double y, double) { return 1.0 - y * y; });
}

inline Var softplus(const Var& a) {
  return detail::pointwise(a, detail::softplus, [](double, double x) { return detail::sigmoid(x); });
}

// ---- shape manipulation ---------------------------------------------------

inline Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  if (start + count > a->cols()) throw ShapeError("slice_cols: out of range");
  Matrix out(a->rows(), count);
  for (std::size_t r = 0; r < a->rows(); ++r)
    std::copy_n(a->value.data.begin() + static_cast<std::ptrdiff_t>(r * a->cols() + start), count,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * count));
  return detail::make(std::move(out), {a}, [a, start, count](Node& self) {
    Matrix& g = a->ensure_grad();
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < count; ++c) g(r, start + c) += self.grad(r, c);
  });
}

inline Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty input");
  const std::size_t rows = xs.front()->rows();
  std::size_t cols = 0;
  for (const auto& x : xs) {
    if (x->rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += x->cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const auto& x : xs) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < x->cols(); ++c) out(r, offset + c) = x->value(r, c);
    offset += x->cols();
  }
  return detail::make(std::move(out), xs, [xs](Node& self) {
    std::size_t off = 0;
    for (const auto& x : xs) {
      if (x->requires_grad) {
        Matrix& g = x->ensure_grad();
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += self.grad(r, off + c);
      }
      off += x->cols();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty input");
  const std::size_t cols = xs.front()->cols();
  std::size_t rows = 0;
  for (const auto& x : xs) {
    if (x->cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += x->rows();
  }
  Matrix out(rows, cols);
  auto it = out.data.begin();
  for (const auto& x : xs) it = std::copy(x->value.data.begin(), x->value.data.end(), it);
  return detail::make(std::move(out), xs, [xs](Node& self) {
    std::size_t off = 0;
    for (const auto& x : xs) {
      if (x->requires_grad) {
        Matrix& g = x->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[off + i];
      }
      off += x->value.size();
    }
  });
}

/// out[r] = a[idx[r]]; gradients scatter-add back.
inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  Matrix out(idx.size(), a->cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a->rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a->value.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * a->cols()), a->cols(),
                out.data.begin() + static_cast<std::ptrdiff_t>(r * a->cols()));
  }
  return detail::make(std::move(out), {a}, [a, idx = std::move(idx)](Node& self) {
    Matrix& g = a->ensure_grad();
    const std::size_t cols = g.cols;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) g.data[idx[r] * cols + c] += self.grad.data[r * cols + c];
  });
}

inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a->value.size()) throw ShapeError("reshape: element count mismatch");
  Matrix out(rows, cols, a->value.data);
  return detail::make(std::move(out), {a}, [a](Node& self) {
    Matrix& g = a->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
  });
}

// ---- fused model ops ------------------------------------------------------

/// 1-D convolution over N sequences of length `len`. Input rows are
/// n*len + t with `in_ch` columns; weight is [out_ch x kernel*in_ch] with
/// column kk*in_ch + c; output rows n*out_len + o.
inline Var conv1d(const Var& x, const Var& weight, const Var& bias, std::size_t n_seq, std::size_t len,
                  std::size_t kernel, std::size_t stride, std::size_t pad_left, std::size_t out_len) {
  const std::size_t in_ch = x->cols();
  if (x->rows() != n_seq * len) throw ShapeError("conv1d: input rows != n_seq * len");
  if (weight->cols() != kernel * in_ch) throw ShapeError("conv1d: weight width != kernel * in_ch");
  const std::size_t width = kernel * in_ch;
  auto col = std::make_shared<Matrix>(n_seq * out_len, width);
  for (std::size_t n = 0; n < n_seq; ++n)
    for (std::size_t o = 0; o < out_len; ++o) {
      double* dst = col->data.data() + (n * out_len + o) * width;
      for (std::size_t kk = 0; kk < kernel; ++kk) {
        const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(o * stride + kk) - static_cast<std::ptrdiff_t>(pad_left);
        if (t < 0 || t >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* src = x->value.data.data() + (n * len + static_cast<std::size_t>(t)) * in_ch;
        std::copy_n(src, in_ch, dst + kk * in_ch);
      }
    }
  Matrix out(n_seq * out_len, weight->rows());
  as_eigen(out).noalias() = as_eigen(*col) * as_eigen(weight->value).transpose();
  as_eigen(out).rowwise() += as_eigen(bias->value).row(0);
  return detail::make(std::move(out), {x, weight, bias},
                      [=](Node& self) {
                        if (weight->requires_grad)
                          as_eigen(weight->ensure_grad()).noalias() += as_eigen(self.grad).transpose() * as_eigen(*col);
                        if (bias->requires_grad) as_eigen(bias->ensure_grad()).row(0) += as_eigen(self.grad).colwise().sum();
                        if (!x->requires_grad) return;
                        Matrix dcol(col->rows, width);
                        as_eigen(dcol).noalias() = as_eigen(self.grad) * as_eigen(weight->value);
                        Matrix& g = x->ensure_grad();
                        for (std::size_t n = 0; n < n_seq; ++n)
                          for (std::size_t o = 0; o < out_len; ++o) {
                            const double* src = dcol.data.data() + (n * out_len + o) * width;
                            for (std::size_t kk = 0; kk < kernel; ++kk) {
                              const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(o * stride + kk) -
                                                       static_cast<std::ptrdiff_t>(pad_left);
                              if (t < 0 || t >= static_cast<std::ptrdiff_t>(len)) continue;
                              double* dst = g.data.data() + (n * len + static_cast<std::size_t>(t)) * in_ch;
                              for (std::size_t c = 0; c < in_ch; ++c) dst[c] += src[kk * in_ch + c];
                            }
                          }
                      });
}

/// Pointwise half of an LSTM cell. `gates` holds pre-activations laid out
/// as [input | forget | cell | output], each `hidden` wide. Returns
/// [h | c], 2*hidden wide.
inline Var lstm_pointwise(const Var& gates, const Var& c_prev) {
  const std::size_t hidden = c_prev->cols();
  if (gates->cols() != 4 * hidden || gates->rows() != c_prev->rows()) throw ShapeError("lstm_pointwise: shape mismatch");
  const std::size_t n = gates->rows();
  auto act = std::make_shared<Matrix>(n, 4 * hidden);  // i f g o after activation
  auto tanh_c = std::make_shared<Matrix>(n, hidden);
  Matrix out(n, 2 * hidden);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < hidden; ++k) {
      const double i = detail::sigmoid(gates->value(r, k));
      const double f = detail::sigmoid(gates->value(r, hidden + k));
      const double g = std::tanh(gates->value(r, 2 * hidden + k));
      const double o = detail::sigmoid(gates->value(r, 3 * hidden + k));
      const double c = f * c_prev->value(r, k) + i * g;
      const double tc = std::tanh(c);
      (*act)(r, k) = i;
      (*act)(r, hidden + k) = f;
      (*act)(r, 2 * hidden + k) = g;
      (*act)(r, 3 * hidden + k) = o;
      (*tanh_c)(r, k) = tc;
      out(r, k) = o * tc;
      out(r, hidden + k) = c;
    }
  return detail::make(std::move(out), {gates, c_prev}, [=](Node& self) {
    Matrix* dg = gates->requires_grad ? &gates->ensure_grad() : nullptr;
    Matrix* dcp = c_prev->requires_grad ? &c_prev->ensure_grad() : nullptr;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < hidden; ++k) {
        const double i = (*act)(r, k), f = (*act)(r, hidden + k), g = (*act)(r, 2 * hidden + k),
                     o = (*act)(r, 3 * hidden + k), tc = (*tanh_c)(r, k);
        const double dh = self.grad(r, k);
        const double dc = self.grad(r, hidden + k) + dh * o * (1.0 - tc * tc);
        if (dg) {
          (*dg)(r, k) += dc * g * i * (1.0 - i);
          (*dg)(r, hidden + k) += dc * c_prev->value(r, k) * f * (1.0 - f);
          (*dg)(r, 2 * hidden + k) += dc * i * (1.0 - g * g);
          (*dg)(r, 3 * hidden + k) += dh * tc * o * (1.0 - o);
        }
        if (dcp) (*dcp)(r, k) += dc * f;
      }
  });
}

namespace detail {

inline std::shared_ptr<std::vector<double>> row_weights(std::vector<double> weights, std::size_t m, const char* op) {
  if (weights.empty()) weights.assign(m, 1.0);
  if (weights.size() != m) throw ShapeError(std::string(op) + ": one weight per row required");
  return std::make_shared<std::vector<double>>(std::move(weights));
}

inline double weight_total(const std::vector<double>& w) {
  double s = 0.0;
  for (double v : w) s += v;
  return s;
}

}  // namespace detail

/// Weighted mean cross-entropy of row-wise softmax(logits) against integer
/// targets. Empty `weights` means uniform.
inline Var cross_entropy(const Var& logits, std::vector<std::size_t> targets, std::vector<double> weights = {}) {
  const std::size_t m = logits->rows(), k = logits->cols();
  if (targets.size() != m) throw ShapeError("cross_entropy: one target per row required");
  auto w = detail::row_weights(std::move(weights), m, "cross_entropy");
  const double wsum = detail::weight_total(*w);
  auto probs = std::make_shared<Matrix>(m, k);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= k) throw ShapeError("cross_entropy: target out of range");
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits->value(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(logits->value(r, c) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < k; ++c) (*probs)(r, c) = std::exp(logits->value(r, c) - lse);
    total += (*w)[r] * (lse - logits->value(r, targets[r]));
  }
  Matrix out(1, 1, wsum > 0.0 ? total / wsum : 0.0);
  return detail::make(std::move(out), {logits}, [logits, probs, w, wsum, targets = std::move(targets), m, k](Node& self) {
    if (wsum <= 0.0) return;
    Matrix& g = logits->ensure_grad();
    const double s = self.grad.data[0] / wsum;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < k; ++c) g(r, c) += s * (*w)[r] * ((*probs)(r, c) - (c == targets[r] ? 1.0 : 0.0));
  });
}

/// Weighted mean binary cross-entropy of sigmoid(logits) (single column)
/// against labels in [0, 1].
inline Var bce_with_logits(const Var& logits, std::vector<double> labels, std::vector<double> weights = {}) {
  const std::size_t m = logits->rows();
  if (logits->cols() != 1 || labels.size() != m) throw ShapeError("bce_with_logits: expects M x 1 logits and M labels");
  auto w = detail::row_weights(std::move(weights), m, "bce_with_logits");
  const double wsum = detail::weight_total(*w);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const double x = logits->value.data[r];
    total += (*w)[r] * (std::max(x, 0.0) - x * labels[r] + std::log1p(std::exp(-std::abs(x))));
  }
  Matrix out(1, 1, wsum > 0.0 ? total / wsum : 0.0);
  return detail::make(std::move(out), {logits}, [logits, w, wsum, labels = std::move(labels), m](Node& self) {
    if (wsum <= 0.0) return;
    Matrix& g = logits->ensure_grad();
    const double s = self.grad.data[0] / wsum;
    for (std::size_t r = 0; r < m; ++r) g.data[r] += s * (*w)[r] * (detail::sigmoid(logits->value.data[r]) - labels[r]);
  });
}

/// out[m, n] = <p[m], z[idx[m*width + n]]>: scores of each row's query
/// against its own candidate set.
inline Var gather_dot(const Var& p, const Var& z, std::vector<std::size_t> idx, std::size_t width) {
  const std::size_t m = p->rows(), d = p->cols();
  if (z->cols() != d) throw ShapeError("gather_dot: feature width mismatch");
  if (idx.size() != m * width) throw ShapeError("gather_dot: index count != rows * width");
  Matrix out(m, width);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t n = 0; n < width; ++n) {
      const std::size_t j = idx[r * width + n];
      if (j >= z->rows()) throw ShapeError("gather_dot: candidate index out of range");
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += p->value(r, c) * z->value(j, c);
      out(r, n) = s;
    }
  return detail::make(std::move(out), {p, z}, [p, z, idx = std::move(idx), width, m, d](Node& self) {
    Matrix* gp = p->requires_grad ? &p->ensure_grad() : nullptr;
    Matrix* gz = z->requires_grad ? &z->ensure_grad() : nullptr;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t n = 0; n < width; ++n) {
        const std::size_t j = idx[r * width + n];
        const double g = self.grad(r, n);
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          if (gp) (*gp)(r, c) += g * z->value(j, c);
          if (gz) (*gz)(j, c) += g * p->value(r, c);
        }
      }
  });
}

/// Rows hold blocks of `block` nodes; row b*block+i is node i's adjacency row.
/// Zeroes the self entry (column i) and divides each row by its off-diagonal
/// sum. Rows whose off-diagonal sum is zero become all-zero.
inline Var normalize_offdiag_rows(const Var& a, std::size_t block) {
  if (a->cols() != block || a->rows() % block != 0) throw ShapeError("normalize_offdiag_rows: expects [B*C x C]");
  const std::size_t rows = a->rows();
  auto sums = std::make_shared<std::vector<double>>(rows, 0.0);
  Matrix out(rows, block);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t self_col = r % block;
    double s = 0.0;
    for (std::size_t j = 0; j < block; ++j)
      if (j != self_col) s += a->value(r, j);
    (*sums)[r] = s;
    if (s == 0.0) continue;
    for (std::size_t j = 0; j < block; ++j)
      if (j != self_col) out(r, j) = a->value(r, j) / s;
  }
  return detail::make(std::move(out), {a}, [a, sums, block, rows](Node& self) {
    Matrix& g = a->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double s = (*sums)[r];
      if (s == 0.0) continue;
      const std::size_t self_col = r % block;
      double dot = 0.0;
      for (std::size_t j = 0; j < block; ++j)
        if (j != self_col) dot += self.grad(r, j) * self.value(r, j);
      for (std::size_t j = 0; j < block; ++j)
        if (j != self_col) g(r, j) += (self.grad(r, j) - dot) / s;
    }
  });
}

/// Block-diagonal product: for each block b of `block` rows,
/// out_b = adj_b [block x block] * x_b [block x H].
inline Var block_matmul(const Var& adj, const Var& x, std::size_t block) {
  if (adj->cols() != block || adj->rows() != x->rows() || x->rows() % block != 0)
    throw ShapeError("block_matmul: expects adj [B*C x C] and x [B*C x H]");
  const std::size_t blocks = x->rows() / block;
  const auto bi = static_cast<Eigen::Index>(block);
  Matrix out(x->rows(), x->cols());
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto off = static_cast<Eigen::Index>(b * block);
    as_eigen(out).middleRows(off, bi).noalias() =
        as_eigen(adj->value).middleRows(off, bi) * as_eigen(x->value).middleRows(off, bi);
  }
  return detail::make(std::move(out), {adj, x}, [adj, x, block, blocks, bi](Node& self) {
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto off = static_cast<Eigen::Index>(b * block);
      auto dout = as_eigen(self.grad).middleRows(off, bi);
      if (adj->requires_grad)
        as_eigen(adj->ensure_grad()).middleRows(off, bi).noalias() += dout * as_eigen(x->value).middleRows(off, bi).transpose();
      if (x->requires_grad)
        as_eigen(x->ensure_grad()).middleRows(off, bi).noalias() += as_eigen(adj->value).middleRows(off, bi).transpose() * dout;
    }
  });
}

/// Single-head scaled dot-product attention within contiguous blocks of
/// `block` rows: out_b = softmax(q_b k_b^T * scale) v_b.
inline Var block_attention(const Var& q, const Var& k, const Var& v, std::size_t block, double scale_factor) {
  detail::check_same(q->value, k->value, "block_attention");
  if (v->rows() != q->rows() || q->rows() % block != 0) throw ShapeError("block_attention: row layout mismatch");
  const std::size_t blocks = q->rows() / block;
  const auto bi = static_cast<Eigen::Index>(block);
  auto probs = std::make_shared<Matrix>(q->rows(), block);
  Matrix out(v->rows(), v->cols());
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto off = static_cast<Eigen::Index>(b * block);
    RowMajor s = scale_factor * (as_eigen(q->value).middleRows(off, bi) * as_eigen(k->value).middleRows(off, bi).transpose());
    for (Eigen::Index r = 0; r < bi; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    as_eigen(*probs).middleRows(off, bi) = s;
    as_eigen(out).middleRows(off, bi).noalias() = s * as_eigen(v->value).middleRows(off, bi);
  }
  return detail::make(std::move(out), {q, k, v}, [=](Node& self) {
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto off = static_cast<Eigen::Index>(b * block);
      auto p = as_eigen(*probs).middleRows(off, bi);
      auto dout = as_eigen(self.grad).middleRows(off, bi);
      if (v->requires_grad) as_eigen(v->ensure_grad()).middleRows(off, bi).noalias() += p.transpose() * dout;
      if (!q->requires_grad && !k->requires_grad) continue;
      RowMajor dp = dout * as_eigen(v->value).middleRows(off, bi).transpose();
      RowMajor ds = p.cwiseProduct(dp);
      for (Eigen::Index r = 0; r < bi; ++r) ds.row(r) -= p.row(r) * ds.row(r).sum();
      ds *= scale_factor;
      if (q->requires_grad) as_eigen(q->ensure_grad()).middleRows(off, bi).noalias() += ds * as_eigen(k->value).middleRows(off, bi);
      if (k->requires_grad)
        as_eigen(k->ensure_grad()).middleRows(off, bi).noalias() += ds.transpose() * as_eigen(q->value).middleRows(off, bi);
    }
  });
}

}  // namespace mbrain::ag
