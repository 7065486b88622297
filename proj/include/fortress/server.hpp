#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "fortress/client.hpp"
#include "fortress/encoder.hpp"
#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

namespace fortress {

struct DefenseHyper {
  double lambda_sep = 1.0;
  double lambda_var = 1.0;
  double tau_sep = 0.5;
  double hot_fraction = 0.05;
  double sp_fraction = 0.05;
  std::size_t neighborhood_k = 5;
  double server_lr = 0.5;
  double ema_beta = 0.5;
  std::size_t steps = 1;
  // Items at or below this frequency quantile count as low-visibility.
  double low_visibility_quantile = 0.5;
  // Drift must exceed this percentile of all drift scores.
  double drift_percentile = 0.9;

  bool enabled() const { return lambda_sep > 0.0 || lambda_var > 0.0; }
  bool operator==(const DefenseHyper&) const = default;
};

inline void validate(const DefenseHyper& h) {
  if (h.lambda_sep < 0.0 || h.lambda_var < 0.0) {
    throw InvalidHyperparameter("lambda_sep and lambda_var must be >= 0");
  }
  if (!(h.tau_sep > 0.0)) throw InvalidHyperparameter("tau_sep must be > 0");
  if (!(h.hot_fraction > 0.0 && h.hot_fraction < 1.0)) {
    throw InvalidHyperparameter("hot_fraction must lie in (0, 1)");
  }
  if (!(h.sp_fraction > 0.0 && h.sp_fraction < 1.0)) {
    throw InvalidHyperparameter("sp_fraction must lie in (0, 1)");
  }
  if (h.hot_fraction + h.sp_fraction > 1.0) {
    throw InvalidHyperparameter("hot_fraction + sp_fraction must be <= 1");
  }
  if (h.neighborhood_k < 2) throw InvalidHyperparameter("neighborhood_k must be >= 2");
  if (!(h.server_lr > 0.0)) throw InvalidHyperparameter("server_lr must be > 0");
  if (!(h.ema_beta >= 0.0 && h.ema_beta < 1.0)) {
    throw InvalidHyperparameter("ema_beta must lie in [0, 1)");
  }
  if (h.low_visibility_quantile < 0.0 || h.low_visibility_quantile > 1.0 ||
      h.drift_percentile < 0.0 || h.drift_percentile > 1.0) {
    throw InvalidHyperparameter("quantiles must lie in [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Client sampling and FedAvg

// Uniform sample without replacement of max(1, ceil(fraction * N)) ids from
// `pool`, returned in ascending order.
inline std::vector<ClientId> sample_clients(std::span<const ClientId> pool, double fraction,
                                            Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidHyperparameter("client fraction must lie in (0, 1]");
  }
  std::vector<ClientId> ids(pool.begin(), pool.end());
  const auto k = std::min(ids.size(), std::max<std::size_t>(
                                          1, static_cast<std::size_t>(std::ceil(
                                                 fraction * static_cast<double>(ids.size())))));
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(ids[i], ids[i + rng.uniform_index(ids.size() - i)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::uint64_t sampling_seed(std::uint64_t base_seed, std::size_t round) {
  return derive_seed({base_seed, static_cast<std::uint64_t>(SeedStream::kSampling), round});
}

// theta = sum_u (n_u / sum_k n_k) theta_u, summed in ascending client-id order
// so the result does not depend on arrival order.
inline ModelParams aggregate(std::span<const ServerUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return updates[a].client_id < updates[b].client_id;
  });
  std::uint64_t total = 0;
  for (const auto& u : updates) total += u.weight;
  if (total == 0) throw std::invalid_argument("aggregate: zero total weight");

  ModelParams out(updates[order[0]].params.shape());
  for (std::size_t idx : order) {
    const auto& u = updates[idx];
    out.check_same_shape(u.params);
    out.add_scaled(static_cast<double>(u.weight) / static_cast<double>(total), u.params);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Popularity statistics

struct PopularityState {
  std::vector<double> magnitude;        // EMA of mean per-round row-delta norm
  std::vector<std::uint64_t> frequency;  // updates in which the item looked like a positive
  std::vector<double> drift;            // EMA of cosine movement toward the hot centroid
  std::size_t rounds_observed = 0;

  static PopularityState empty(std::size_t num_items) {
    return {std::vector<double>(num_items, 0.0), std::vector<std::uint64_t>(num_items, 0),
            std::vector<double>(num_items, 0.0), 0};
  }
  bool operator==(const PopularityState&) const = default;
};

namespace detail {
// Top ceil(fraction * M) items by score, ties to the lower id.
inline ItemSeq top_fraction(std::span<const double> score, double fraction) {
  const std::size_t m = score.size();
  const auto k = std::min(
      m, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m))));
  ItemSeq ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](ItemId a, ItemId b) { return score[a] > score[b]; });
  ids.resize(k);
  return ids;
}

inline Vec64 centroid(const ModelParams& p, std::span<const ItemId> items) {
  Vec64 c(p.dim());
  if (items.empty()) return c;
  for (ItemId k : items) axpy(1.0, p.embedding(k), c.values());
  scale_in_place(c.values(), 1.0 / static_cast<double>(items.size()));
  return c;
}

// Nearest-rank percentile.
template <class T>
T percentile(std::vector<T> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(xs.size() - 1)));
  return xs[idx];
}
}  // namespace detail

// Folds one round of updates into the state. `previous` is the global model
// the round started from and `current` the aggregate. With full-softmax
// scoring every row moves in every update, so "nonzero delta" carries no
// signal. Rows of items a client did not interact with all move along one
// shared direction (minus the softmax-weighted hidden states); the client's
// positives move against it. An update therefore touches item k when row k's
// delta opposes the summed delta of the update's below-median-norm rows.
inline PopularityState update_popularity(const PopularityState& state,
                                         const ModelParams& previous,
                                         std::span<const ServerUpdate> updates,
                                         const ModelParams& current, const DefenseHyper& hyper) {
  const std::size_t m = previous.num_items();
  const std::size_t d = previous.dim();
  PopularityState next = state;
  if (next.magnitude.size() != m) next = PopularityState::empty(m);

  std::vector<double> sum(m, 0.0), norms(m), delta(m * d);
  Vec64 crowd(d);
  auto row = [&](std::size_t k) { return std::span<double>(delta).subspan(k * d, d); };
  for (const auto& u : updates) {
    previous.check_same_shape(u.params);
    for (std::size_t k = 0; k < m; ++k) {
      const auto a = u.params.embedding(k), b = previous.embedding(k);
      auto dk = row(k);
      for (std::size_t i = 0; i < d; ++i) dk[i] = a[i] - b[i];
      norms[k] = norm2(dk);
      sum[k] += norms[k];
    }
    std::vector<double> sorted = norms;
    std::nth_element(sorted.begin(), sorted.begin() + m / 2, sorted.end());
    const double median = sorted[m / 2];
    std::fill(crowd.begin(), crowd.end(), 0.0);
    for (std::size_t k = 0; k < m; ++k) {
      if (norms[k] <= median) axpy(1.0, row(k), crowd.values());
    }
    for (std::size_t k = 0; k < m; ++k) {
      if (dot(row(k), crowd) < 0.0) ++next.frequency[k];
    }
  }
  const double beta = hyper.ema_beta;
  const double n = updates.empty() ? 1.0 : static_cast<double>(updates.size());
  for (std::size_t k = 0; k < m; ++k) {
    next.magnitude[k] = beta * next.magnitude[k] + (1.0 - beta) * (sum[k] / n);
  }

  const ItemSeq hot = detail::top_fraction(next.magnitude, hyper.hot_fraction);
  const Vec64 c = detail::centroid(current, hot);
  for (std::size_t k = 0; k < m; ++k) {
    const double moved = cosine_sim(current.embedding(k), c) - cosine_sim(previous.embedding(k), c);
    next.drift[k] = beta * next.drift[k] + (1.0 - beta) * moved;
  }
  ++next.rounds_observed;
  return next;
}

struct ItemSets {
  ItemSeq hot;
  ItemSeq suspicious;
};

// V_hot: top hot_fraction by magnitude. V_sp: low-visibility items (frequency
// at or below the low_visibility_quantile) whose drift toward the hot
// centroid is positive and strictly above the drift_percentile, strongest
// first, capped at ceil(sp_fraction * M). Hot items are never suspicious.
inline ItemSets identify_sets(const PopularityState& state, const DefenseHyper& hyper) {
  ItemSets sets;
  const std::size_t m = state.magnitude.size();
  if (state.rounds_observed == 0 || m == 0) return sets;
  sets.hot = detail::top_fraction(state.magnitude, hyper.hot_fraction);
  std::vector<char> is_hot(m, 0);
  for (ItemId k : sets.hot) is_hot[k] = 1;

  const std::uint64_t freq_cut = detail::percentile(state.frequency, hyper.low_visibility_quantile);
  const double drift_cut = detail::percentile(state.drift, hyper.drift_percentile);
  ItemSeq cands;
  for (std::size_t k = 0; k < m; ++k) {
    if (!is_hot[k] && state.frequency[k] <= freq_cut && state.drift[k] > drift_cut &&
        state.drift[k] > 0.0) {
      cands.push_back(static_cast<ItemId>(k));
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [&](ItemId a, ItemId b) { return state.drift[a] > state.drift[b]; });
  const auto cap = static_cast<std::size_t>(std::ceil(hyper.sp_fraction * static_cast<double>(m)));
  if (cands.size() > cap) cands.resize(cap);
  sets.suspicious = std::move(cands);
  return sets;
}

// ---------------------------------------------------------------------------
// Defense losses

// sum_{i in hot} -log( exp(1/tau) / sum_{j in sp} exp(sim(v_i, v_j)/tau) )
inline LossAndGrad sep_loss(const ModelParams& params, std::span<const ItemId> hot,
                            std::span<const ItemId> sp, double tau) {
  if (!(tau > 0.0)) throw InvalidHyperparameter("sep_loss: tau must be > 0");
  LossAndGrad out{0.0, ModelParams(params.shape())};
  if (hot.empty() || sp.empty()) return out;
  std::vector<double> logits(sp.size());
  for (ItemId i : hot) {
    const auto vi = params.embedding(i);
    for (std::size_t j = 0; j < sp.size(); ++j) {
      logits[j] = cosine_sim(vi, params.embedding(sp[j])) / tau;
    }
    const double lse = log_sum_exp(logits);
    out.loss += lse - 1.0 / tau;
    for (std::size_t j = 0; j < sp.size(); ++j) {
      const double p = std::exp(logits[j] - lse);
      cosine_sim_backward(vi, params.embedding(sp[j]), p / tau, out.grad.embedding(i),
                          out.grad.embedding(sp[j]));
    }
  }
  return out;
}

// For each hot item, its k nearest real items by cosine similarity (itself
// included), ties to the lower id.
inline std::vector<ItemSeq> hot_neighborhoods(const ModelParams& params,
                                              std::span<const ItemId> hot, std::size_t k) {
  const std::size_t m = params.num_items();
  const std::size_t kk = std::min(k, m);
  std::vector<ItemSeq> out;
  std::vector<double> sim(m);
  ItemSeq ids(m);
  for (ItemId i : hot) {
    for (std::size_t j = 0; j < m; ++j) {
      sim[j] = j == i ? 2.0 : cosine_sim(params.embedding(i), params.embedding(j));
    }
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(), [&](ItemId a, ItemId b) {
      return sim[a] > sim[b] || (sim[a] == sim[b] && a < b);
    });
    out.emplace_back(ids.begin(), ids.begin() + kk);
  }
  return out;
}

// sum over neighborhoods of mean-over-dimensions population variance.
inline LossAndGrad var_loss_fixed(const ModelParams& params,
                                  std::span<const ItemSeq> neighborhoods) {
  LossAndGrad out{0.0, ModelParams(params.shape())};
  const std::size_t d = params.dim();
  Vec64 mean(d);
  for (const ItemSeq& nb : neighborhoods) {
    if (nb.empty()) continue;
    const double inv_k = 1.0 / static_cast<double>(nb.size());
    std::fill(mean.begin(), mean.end(), 0.0);
    for (ItemId j : nb) axpy(inv_k, params.embedding(j), mean.values());
    double var = 0.0;
    for (ItemId j : nb) var += squared_distance(params.embedding(j), mean);
    out.loss += var * inv_k / static_cast<double>(d);
    const double coeff = 2.0 * inv_k / static_cast<double>(d);
    for (ItemId j : nb) {
      auto g = out.grad.embedding(j);
      const auto x = params.embedding(j);
      for (std::size_t i = 0; i < d; ++i) g[i] += coeff * (x[i] - mean[i]);
    }
  }
  return out;
}

inline LossAndGrad var_loss(const ModelParams& params, std::span<const ItemId> hot,
                            std::size_t neighborhood_k) {
  const auto nbs = hot_neighborhoods(params, hot, neighborhood_k);
  return var_loss_fixed(params, nbs);
}

struct DefenseDiagnostics {
  std::size_t hot_size = 0;
  std::size_t sp_size = 0;
  double sep = 0.0;  // before the step
  double var = 0.0;
  double server_loss_before = 0.0;
  double server_loss_after = 0.0;
  std::size_t backtracks = 0;
  bool applied = false;
};

struct DefenseResult {
  ModelParams params;
  DefenseDiagnostics diagnostics;
  ItemSets sets;
};

// Gradient descent on lambda_sep * L_sep + lambda_var * L_var over item
// embedding rows. If a step raises the loss it is retried at lr/10 (up to
// three times); neighborhoods are frozen within a step.
inline DefenseResult defense_step(const ModelParams& params, const PopularityState& state,
                                  const DefenseHyper& hyper) {
  DefenseResult r{params, {}, identify_sets(state, hyper)};
  r.diagnostics.hot_size = r.sets.hot.size();
  r.diagnostics.sp_size = r.sets.suspicious.size();
  if (!hyper.enabled() || r.sets.hot.empty()) return r;

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    const auto nbs = hot_neighborhoods(r.params, r.sets.hot, hyper.neighborhood_k);
    auto evaluate = [&](const ModelParams& p, ModelParams* grad) {
      double total = 0.0;
      if (hyper.lambda_sep > 0.0) {
        auto s = sep_loss(p, r.sets.hot, r.sets.suspicious, hyper.tau_sep);
        total += hyper.lambda_sep * s.loss;
        if (grad) grad->add_scaled(hyper.lambda_sep, s.grad);
        if (grad && step == 0) r.diagnostics.sep = s.loss;
      }
      if (hyper.lambda_var > 0.0) {
        auto v = var_loss_fixed(p, nbs);
        total += hyper.lambda_var * v.loss;
        if (grad) grad->add_scaled(hyper.lambda_var, v.grad);
        if (grad && step == 0) r.diagnostics.var = v.loss;
      }
      return total;
    };
    ModelParams grad(params.shape());
    const double before = evaluate(r.params, &grad);
    if (step == 0) r.diagnostics.server_loss_before = before;

    double lr = hyper.server_lr;
    ModelParams trial = r.params;
    double after = before;
    for (int attempt = 0; attempt < 4; ++attempt) {
      trial = r.params;
      axpy(-lr, grad.embedding_table(), trial.embedding_table());
      after = evaluate(trial, nullptr);
      if (after <= before) break;
      ++r.diagnostics.backtracks;
      lr /= 10.0;
    }
    if (after <= before) {
      r.params = std::move(trial);
      r.diagnostics.applied = true;
    } else {
      after = before;
    }
    r.diagnostics.server_loss_after = after;
  }
  return r;
}

}  // namespace fortress
