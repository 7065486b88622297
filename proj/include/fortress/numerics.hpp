#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fortress {

class InvalidHyperparameter : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense vector of doubles.
class Vec64 {
 public:
  Vec64() = default;
  explicit Vec64(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vec64(std::initializer_list<double> values) : data_(values) {}
  explicit Vec64(std::vector<double> values) : data_(std::move(values)) {}
  explicit Vec64(std::span<const double> values)
      : data_(values.begin(), values.end()) {}

  std::size_t dim() const { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  operator std::span<const double>() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool operator==(const Vec64&) const = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix of doubles.
class Mat64 {
 public:
  Mat64() = default;
  Mat64(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const Mat64&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Span kernels. Callers guarantee matching sizes.

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double squared_distance(std::span<const double> a,
                               std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale_in_place(std::span<double> x, double alpha) {
  for (double& v : x) v *= alpha;
}

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Cosine similarity

namespace detail {
inline std::atomic<std::uint64_t>& degenerate_similarity_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
}  // namespace detail

// Number of cosine evaluations that hit a zero-norm input since process start.
inline std::uint64_t degenerate_similarity_count() {
  return detail::degenerate_similarity_counter().load(std::memory_order_relaxed);
}

struct Similarity {
  double value = 0.0;
  bool degenerate = false;
};

inline Similarity cosine_similarity(std::span<const double> a,
                                    std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: dimension mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) {
    detail::degenerate_similarity_counter().fetch_add(1, std::memory_order_relaxed);
    return {0.0, true};
  }
  return {std::clamp(dot(a, b) / (na * nb), -1.0, 1.0), false};
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  return cosine_similarity(a, b).value;
}

// Accumulates coeff * d cos(a,b) / da into grad_a and coeff * d cos / db into
// grad_b. Zero-norm inputs contribute nothing.
inline void cosine_sim_backward(std::span<const double> a,
                                std::span<const double> b, double coeff,
                                std::span<double> grad_a,
                                std::span<double> grad_b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0 || coeff == 0.0) return;
  const double inv = 1.0 / (na * nb);
  const double s = dot(a, b) * inv;
  const double ka = s / (na * na);
  const double kb = s / (nb * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!grad_a.empty()) grad_a[i] += coeff * (b[i] * inv - ka * a[i]);
    if (!grad_b.empty()) grad_b[i] += coeff * (a[i] * inv - kb * b[i]);
  }
}

// ---------------------------------------------------------------------------
// InfoNCE over cosine similarities. The positive pair is part of the
// denominator, so the loss is always >= 0.

struct InfoNceResult {
  double loss = 0.0;
  Vec64 grad_anchor;
  Vec64 grad_positive;
  std::vector<Vec64> grad_negatives;
};

inline double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline InfoNceResult info_nce(std::span<const double> anchor,
                              std::span<const double> positive,
                              std::span<const Vec64> negatives, double tau) {
  if (!(tau > 0.0)) throw InvalidHyperparameter("info_nce: tau must be > 0");
  const std::size_t d = anchor.size();
  if (positive.size() != d) throw ShapeError("info_nce: positive dimension mismatch");
  for (const Vec64& n : negatives) {
    if (n.dim() != d) throw ShapeError("info_nce: negative dimension mismatch");
  }

  InfoNceResult out;
  out.grad_anchor = Vec64(d);
  out.grad_positive = Vec64(d);
  out.grad_negatives.assign(negatives.size(), Vec64(d));
  if (negatives.empty()) return out;

  std::vector<double> logits(negatives.size() + 1);
  logits[0] = cosine_sim(anchor, positive) / tau;
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    logits[j + 1] = cosine_sim(anchor, negatives[j].values()) / tau;
  }
  const double lse = log_sum_exp(logits);
  out.loss = lse - logits[0];

  // dL/dlogit_i = softmax_i - [i == 0]; dlogit/dsim = 1/tau.
  const double p0 = std::exp(logits[0] - lse);
  cosine_sim_backward(anchor, positive, (p0 - 1.0) / tau, out.grad_anchor.values(),
                      out.grad_positive.values());
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    const double pj = std::exp(logits[j + 1] - lse);
    cosine_sim_backward(anchor, negatives[j].values(), pj / tau,
                        out.grad_anchor.values(), out.grad_negatives[j].values());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

// Writes softmax(logits) - onehot(target) into grad and returns the loss.
inline double softmax_cross_entropy_into(std::span<const double> logits,
                                         std::size_t target,
                                         std::span<double> grad) {
  if (target >= logits.size()) {
    throw std::out_of_range("softmax_cross_entropy: target index " +
                            std::to_string(target) + " out of range for " +
                            std::to_string(logits.size()) + " logits");
  }
  const double lse = log_sum_exp(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) grad[i] = std::exp(logits[i] - lse);
  grad[target] -= 1.0;
  return lse - logits[target];
}

struct CrossEntropyResult {
  double loss = 0.0;
  Vec64 grad;
};

inline CrossEntropyResult softmax_cross_entropy(std::span<const double> logits,
                                                std::size_t target) {
  CrossEntropyResult out;
  out.grad = Vec64(logits.size());
  out.loss = softmax_cross_entropy_into(logits, target, out.grad.values());
  return out;
}

// ---------------------------------------------------------------------------
// Global-norm clipping

inline double clip_global_norm(std::span<double> grad, double max_norm) {
  const double n = norm2(grad);
  if (max_norm > 0.0 && n > max_norm) scale_in_place(grad, max_norm / n);
  return n;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

template <class P>
concept FlatParams = std::copy_constructible<P> && requires(P p, const P cp) {
  { p.values() } -> std::convertible_to<std::span<double>>;
  { cp.values() } -> std::convertible_to<std::span<const double>>;
};

// Central differences against an analytic gradient. When max_coords > 0 and
// smaller than the parameter count, checks an evenly strided subset starting
// at `offset`. Returns max |fd - an| / max(1, |fd|, |an|).
template <FlatParams P, class F>
  requires std::invocable<F&, const P&>
double finite_diff_check(F&& f, const P& params, const P& analytic, double eps,
                         std::size_t max_coords = 0, std::size_t offset = 0) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw InvalidHyperparameter("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  }
  P probe = params;
  std::span<double> x = probe.values();
  std::span<const double> an = analytic.values();
  if (an.size() != x.size()) throw ShapeError("finite_diff_check: gradient shape mismatch");

  const std::size_t n = x.size();
  std::size_t stride = 1;
  if (max_coords > 0 && max_coords < n) stride = n / max_coords;

  double worst = 0.0;
  for (std::size_t i = offset % stride; i < n; i += stride) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double fp = static_cast<double>(f(std::as_const(probe)));
    x[i] = saved - eps;
    const double fm = static_cast<double>(f(std::as_const(probe)));
    x[i] = saved;
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(fd - an[i]) / std::max({1.0, std::abs(fd), std::abs(an[i])});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fortress
