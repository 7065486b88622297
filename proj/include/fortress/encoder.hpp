#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fortress/data.hpp"
#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

namespace fortress {

struct ModelShape {
  std::size_t num_items = 0;  // M real items; the table has M+1 rows
  std::size_t dim = 0;        // d

  bool operator==(const ModelShape&) const = default;
};

// Flat parameter bundle. Layout:
//   item_embeddings (M+1) x d | encoder block
// where the encoder block is
//   W_update, W_reset, W_cand (each d x 2d) | b_update, b_reset, b_cand (d) |
//   out_proj (d x d).
// Every tensor is a view into one contiguous buffer so the FedAvg algebra is a
// single loop.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelShape shape) : shape_(shape), data_(total_size(shape), 0.0) {}

  static std::size_t total_size(ModelShape s) {
    const std::size_t d = s.dim;
    return (s.num_items + 1) * d + 3 * d * 2 * d + 3 * d + d * d;
  }

  const ModelShape& shape() const { return shape_; }
  std::size_t num_items() const { return shape_.num_items; }
  std::size_t dim() const { return shape_.dim; }
  std::size_t size() const { return data_.size(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  std::span<double> embedding_table() { return values().first(table_size()); }
  std::span<const double> embedding_table() const { return values().first(table_size()); }
  std::span<double> encoder_values() { return values().subspan(table_size()); }
  std::span<const double> encoder_values() const { return values().subspan(table_size()); }

  std::span<double> embedding(std::size_t item) { return values().subspan(item * dim(), dim()); }
  std::span<const double> embedding(std::size_t item) const {
    return values().subspan(item * dim(), dim());
  }

  // Gate weight matrices, d rows by 2d columns, row-major. Gate 0 = update,
  // 1 = reset, 2 = candidate.
  std::span<double> gate_weights(int gate) {
    return values().subspan(table_size() + gate * weight_size(), weight_size());
  }
  std::span<const double> gate_weights(int gate) const {
    return values().subspan(table_size() + gate * weight_size(), weight_size());
  }
  std::span<double> gate_bias(int gate) {
    return values().subspan(table_size() + 3 * weight_size() + gate * dim(), dim());
  }
  std::span<const double> gate_bias(int gate) const {
    return values().subspan(table_size() + 3 * weight_size() + gate * dim(), dim());
  }
  std::span<double> out_proj() { return values().subspan(data_.size() - dim() * dim()); }
  std::span<const double> out_proj() const {
    return values().subspan(data_.size() - dim() * dim());
  }

  void zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  ModelParams& operator+=(const ModelParams& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  ModelParams& operator-=(const ModelParams& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  ModelParams& operator*=(double a) {
    for (double& v : data_) v *= a;
    return *this;
  }
  // this += a * o
  ModelParams& add_scaled(double a, const ModelParams& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
    return *this;
  }
  friend ModelParams operator+(ModelParams a, const ModelParams& b) { return a += b; }
  friend ModelParams operator-(ModelParams a, const ModelParams& b) { return a -= b; }
  friend ModelParams operator*(ModelParams a, double s) { return a *= s; }

  double l2_norm() const { return norm2(data_); }
  bool is_finite() const { return all_finite(data_); }

  bool operator==(const ModelParams&) const = default;

  void check_same_shape(const ModelParams& o) const {
    if (!(shape_ == o.shape_)) throw ShapeError("ModelParams: shape mismatch");
  }

 private:
  std::size_t table_size() const { return (shape_.num_items + 1) * shape_.dim; }
  std::size_t weight_size() const { return shape_.dim * 2 * shape_.dim; }

  ModelShape shape_;
  std::vector<double> data_;
};

// Uniform(-1/sqrt(d), 1/sqrt(d)) embeddings and gate weights, zero biases,
// zero mask row, identity output projection.
inline ModelParams init_params(ModelShape shape, std::uint64_t seed) {
  if (shape.dim < 2) throw InvalidHyperparameter("init_params: dim must be >= 2");
  if (shape.num_items < 1) throw InvalidHyperparameter("init_params: need at least one item");
  ModelParams p(shape);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.dim));
  for (std::size_t k = 0; k < shape.num_items; ++k) {
    for (double& v : p.embedding(k)) v = rng.uniform(-bound, bound);
  }
  for (int g = 0; g < 3; ++g) {
    for (double& v : p.gate_weights(g)) v = rng.uniform(-bound, bound);
  }
  auto proj = p.out_proj();
  for (std::size_t i = 0; i < shape.dim; ++i) proj[i * shape.dim + i] = 1.0;
  return p;
}

// Cached activations from one forward pass. Row t of each buffer is time
// step t; hidden has T+1 rows with the zero initial state in row 0.
struct EncodeTrace {
  std::size_t dim = 0;
  ItemSeq inputs;
  std::vector<double> hidden;  // (T+1) x d
  std::vector<double> update;  // z, T x d
  std::vector<double> reset;   // r, T x d
  std::vector<double> cand;    // n, T x d
  std::vector<double> output;  // out_proj * h_t, T x d

  std::size_t length() const { return inputs.size(); }
  std::span<const double> hidden_at(std::size_t t) const {  // h_t, t in [0, T]
    return {hidden.data() + t * dim, dim};
  }
  std::span<const double> output_at(std::size_t t) const {  // after input t
    return {output.data() + t * dim, dim};
  }
  std::span<const double> final_output() const { return output_at(length() - 1); }
};

struct Encoding {
  Vec64 h;
  EncodeTrace trace;
};

namespace detail {
// y = W[:, :d] a + W[:, d:] b + bias for a d x 2d row-major W.
inline void gate_affine(std::span<const double> w, std::span<const double> bias,
                        std::span<const double> a, std::span<const double> b,
                        std::span<double> y) {
  const std::size_t d = y.size();
  for (std::size_t i = 0; i < d; ++i) {
    const double* row = w.data() + i * 2 * d;
    double s = bias[i];
    for (std::size_t j = 0; j < d; ++j) s += row[j] * a[j];
    for (std::size_t j = 0; j < d; ++j) s += row[d + j] * b[j];
    y[i] = s;
  }
}

// dW += g (a;b)^T, db += g, da += W[:, :d]^T g, db_in += W[:, d:]^T g.
inline void gate_affine_backward(std::span<const double> w, std::span<const double> a,
                                 std::span<const double> b, std::span<const double> g,
                                 std::span<double> dw, std::span<double> dbias,
                                 std::span<double> da, std::span<double> db) {
  const std::size_t d = g.size();
  for (std::size_t i = 0; i < d; ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    const double* row = w.data() + i * 2 * d;
    double* drow = dw.data() + i * 2 * d;
    dbias[i] += gi;
    for (std::size_t j = 0; j < d; ++j) {
      drow[j] += gi * a[j];
      drow[d + j] += gi * b[j];
      da[j] += gi * row[j];
      db[j] += gi * row[d + j];
    }
  }
}
}  // namespace detail

inline EncodeTrace encode_trace(const ModelParams& params, std::span<const ItemId> seq) {
  if (seq.empty()) throw std::invalid_argument("encode: empty sequence");
  const std::size_t d = params.dim();
  const std::size_t steps = seq.size();
  EncodeTrace tr;
  tr.dim = d;
  tr.inputs.assign(seq.begin(), seq.end());
  tr.hidden.assign((steps + 1) * d, 0.0);
  tr.update.resize(steps * d);
  tr.reset.resize(steps * d);
  tr.cand.resize(steps * d);
  tr.output.resize(steps * d);

  std::vector<double> rh(d);
  const auto proj = params.out_proj();
  for (std::size_t t = 0; t < steps; ++t) {
    if (seq[t] > params.num_items()) {
      throw std::out_of_range("encode: item id " + std::to_string(seq[t]) + " out of range");
    }
    const auto x = params.embedding(seq[t]);
    const std::span<const double> hp(tr.hidden.data() + t * d, d);
    std::span<double> z(tr.update.data() + t * d, d);
    std::span<double> r(tr.reset.data() + t * d, d);
    std::span<double> n(tr.cand.data() + t * d, d);
    std::span<double> h(tr.hidden.data() + (t + 1) * d, d);

    detail::gate_affine(params.gate_weights(0), params.gate_bias(0), x, hp, z);
    detail::gate_affine(params.gate_weights(1), params.gate_bias(1), x, hp, r);
    for (std::size_t i = 0; i < d; ++i) {
      z[i] = sigmoid(z[i]);
      r[i] = sigmoid(r[i]);
      rh[i] = r[i] * hp[i];
    }
    detail::gate_affine(params.gate_weights(2), params.gate_bias(2), x, rh, n);
    for (std::size_t i = 0; i < d; ++i) {
      n[i] = std::tanh(n[i]);
      h[i] = (1.0 - z[i]) * n[i] + z[i] * hp[i];
    }
    double* o = tr.output.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      o[i] = dot(proj.subspan(i * d, d), h);
    }
  }
  return tr;
}

// Final output of the recurrent layer after out_proj.
inline Encoding encode(const ModelParams& params, std::span<const ItemId> seq) {
  Encoding e;
  e.trace = encode_trace(params, seq);
  e.h = Vec64(e.trace.final_output());
  return e;
}

// logits[k] = <h, v_k> for the M real items; the mask row is never scored.
inline void score_items_into(const ModelParams& params, std::span<const double> h,
                             std::span<double> logits) {
  for (std::size_t k = 0; k < params.num_items(); ++k) logits[k] = dot(h, params.embedding(k));
}

inline Vec64 score_items(const ModelParams& params, std::span<const double> h) {
  if (h.size() != params.dim()) throw ShapeError("score_items: hidden dimension mismatch");
  Vec64 logits(params.num_items());
  score_items_into(params, h, logits.values());
  return logits;
}

// dE[k] += coeff_k * h for every real item k: the embedding-side half of the
// scoring gradient.
inline void score_items_backward_table(std::span<const double> coeffs,
                                       std::span<const double> h, ModelParams& grad) {
  for (std::size_t k = 0; k < coeffs.size(); ++k) {
    if (coeffs[k] != 0.0) axpy(coeffs[k], h, grad.embedding(k));
  }
}

// dh += sum_k coeff_k * v_k.
inline void score_items_backward_hidden(const ModelParams& params,
                                        std::span<const double> coeffs,
                                        std::span<double> dh) {
  for (std::size_t k = 0; k < coeffs.size(); ++k) {
    if (coeffs[k] != 0.0) axpy(coeffs[k], params.embedding(k), dh);
  }
}

// Backprop through time. `upstream` holds dL/d output_t for every step (T x
// d, row-major); gradients are accumulated into `grad`.
inline void backward_steps_into(const ModelParams& params, const EncodeTrace& tr,
                                std::span<const double> upstream, ModelParams& grad) {
  const std::size_t d = params.dim();
  if (tr.dim != d || upstream.size() != tr.length() * d) {
    throw ShapeError("backward: trace does not match parameters");
  }
  params.check_same_shape(grad);
  const auto proj = params.out_proj();
  auto dproj = grad.out_proj();
  std::vector<double> dh(d, 0.0), carry(d, 0.0), dz(d), dn(d), dr(d), dx(d), dhp(d), drh(d),
      rh(d);

  for (std::size_t step = tr.length(); step-- > 0;) {
    const auto up = upstream.subspan(step * d, d);
    const auto h = tr.hidden_at(step + 1);
    const auto hp = tr.hidden_at(step);
    const double* z = tr.update.data() + step * d;
    const double* r = tr.reset.data() + step * d;
    const double* n = tr.cand.data() + step * d;

    // o = P h
    dh = carry;
    for (std::size_t i = 0; i < d; ++i) {
      const double ui = up[i];
      if (ui == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) {
        dproj[i * d + j] += ui * h[j];
        dh[j] += ui * proj[i * d + j];
      }
    }

    // h = (1 - z) n + z hp
    for (std::size_t i = 0; i < d; ++i) {
      dz[i] = dh[i] * (hp[i] - n[i]) * z[i] * (1.0 - z[i]);
      dn[i] = dh[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i]);
      dhp[i] = dh[i] * z[i];
      rh[i] = r[i] * hp[i];
      dx[i] = 0.0;
      drh[i] = 0.0;
    }
    const auto x = params.embedding(tr.inputs[step]);

    // n = tanh(Wn [x; r*hp] + bn)
    detail::gate_affine_backward(params.gate_weights(2), x, rh, dn, grad.gate_weights(2),
                                 grad.gate_bias(2), dx, drh);
    for (std::size_t i = 0; i < d; ++i) {
      dr[i] = drh[i] * hp[i] * r[i] * (1.0 - r[i]);
      dhp[i] += drh[i] * r[i];
    }
    detail::gate_affine_backward(params.gate_weights(1), x, hp, dr, grad.gate_weights(1),
                                 grad.gate_bias(1), dx, dhp);
    detail::gate_affine_backward(params.gate_weights(0), x, hp, dz, grad.gate_weights(0),
                                 grad.gate_bias(0), dx, dhp);

    axpy(1.0, dx, grad.embedding(tr.inputs[step]));
    carry = dhp;
  }
}

// Gradient bundle for an upstream gradient on the final output only.
inline void backward_into(const ModelParams& params, const EncodeTrace& tr,
                          std::span<const double> upstream_final, ModelParams& grad) {
  if (upstream_final.size() != params.dim()) throw ShapeError("backward: upstream dimension");
  std::vector<double> up(tr.length() * params.dim(), 0.0);
  std::copy(upstream_final.begin(), upstream_final.end(),
            up.begin() + (tr.length() - 1) * params.dim());
  backward_steps_into(params, tr, up, grad);
}

inline ModelParams backward(const ModelParams& params, const EncodeTrace& tr,
                            std::span<const double> upstream_final) {
  ModelParams grad(params.shape());
  backward_into(params, tr, upstream_final, grad);
  return grad;
}

}  // namespace fortress
