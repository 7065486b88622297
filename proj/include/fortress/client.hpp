#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fortress/data.hpp"
#include "fortress/encoder.hpp"
#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

namespace fortress {

using ClientId = std::uint32_t;

struct LossAndGrad {
  double loss = 0.0;
  ModelParams grad;
};

// What n_u counts: train interactions, or next-item prediction samples.
enum class WeightBy { kInteractions, kSamples };

struct ClientHyper {
  double lambda_cl = 0.1;
  double lambda_tcr = 0.1;
  double tau = 0.5;
  double noise_sigma = 0.1;
  std::size_t local_epochs = 5;
  double lr = 0.5;
  std::size_t tcr_window = 5;
  double item_view_step = 0.1;
  std::size_t neg_count = 4;
  double clip_norm = 5.0;
  AugmentationPolicy augmentation;
  WeightBy weight_by = WeightBy::kInteractions;

  bool operator==(const ClientHyper&) const = default;
};

inline void validate(const ClientHyper& h) {
  if (h.lambda_cl < 0.0) throw InvalidHyperparameter("lambda_cl must be >= 0");
  if (h.lambda_tcr < 0.0) throw InvalidHyperparameter("lambda_tcr must be >= 0");
  if (!(h.tau > 0.0)) throw InvalidHyperparameter("tau must be > 0");
  if (h.noise_sigma < 0.0) throw InvalidHyperparameter("noise_sigma must be >= 0");
  if (h.local_epochs < 1) throw InvalidHyperparameter("local_epochs must be >= 1");
  if (!(h.lr > 0.0)) throw InvalidHyperparameter("lr must be > 0");
  if (h.tcr_window < 1) throw InvalidHyperparameter("tcr_window must be >= 1");
  if (h.item_view_step < 0.0) throw InvalidHyperparameter("item_view_step must be >= 0");
  if (h.clip_norm < 0.0) throw InvalidHyperparameter("clip_norm must be >= 0");
  validate(h.augmentation);
}

enum class Provenance : std::uint8_t { kBenign, kMalicious };

// The only thing the server ever receives.
struct ServerUpdate {
  ClientId client_id = 0;
  std::uint64_t weight = 0;  // n_u
  ModelParams params;
};

struct ClientUpdate {
  ServerUpdate update;
  Provenance provenance = Provenance::kBenign;  // harness bookkeeping only
  std::size_t round = 0;
};

// Per-client rng stream for one round.
inline std::uint64_t client_seed(std::uint64_t base_seed, std::size_t round, ClientId client) {
  return derive_seed({base_seed, static_cast<std::uint64_t>(SeedStream::kClient), round, client});
}

// ---------------------------------------------------------------------------
// Recommendation loss

// Mean next-item cross-entropy over positions 1..T-1 of `seq`; a single GRU
// pass provides every prefix encoding. Adds scale * gradient into `grad` and
// returns the loss.
inline double rec_loss_into(const ModelParams& params, std::span<const ItemId> seq,
                            ModelParams& grad, double scale) {
  if (seq.size() < 2) throw std::invalid_argument("rec_loss: need at least 2 items");
  const std::size_t d = params.dim();
  const std::size_t m = params.num_items();
  const auto inputs = seq.first(seq.size() - 1);
  const EncodeTrace tr = encode_trace(params, inputs);
  const std::size_t positions = inputs.size();
  const double w = scale / static_cast<double>(positions);

  std::vector<double> logits(m), g(m), upstream(positions * d, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < positions; ++t) {
    const auto o = tr.output_at(t);
    score_items_into(params, o, logits);
    total += softmax_cross_entropy_into(logits, seq[t + 1], g);
    for (double& v : g) v *= w;
    score_items_backward_table(g, o, grad);
    score_items_backward_hidden(params, g, std::span<double>(upstream).subspan(t * d, d));
  }
  backward_steps_into(params, tr, upstream, grad);
  return total / static_cast<double>(positions);
}

inline LossAndGrad rec_loss(const ModelParams& params, std::span<const ItemId> seq) {
  LossAndGrad out{0.0, ModelParams(params.shape())};
  out.loss = rec_loss_into(params, seq, out.grad, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Sequence view

// Fixed random material for one sequence-view evaluation.
struct SequenceViews {
  ItemSeq view1;
  ItemSeq view2;
  std::vector<ItemSeq> negatives;  // order-destroyed copies of the sequence
};

// Cyclic permutation of positions (Sattolo), so no element stays in place.
inline ItemSeq derange(std::span<const ItemId> seq, Rng& rng) {
  ItemSeq out(seq.begin(), seq.end());
  for (std::size_t i = out.size(); i > 1; --i) {
    std::swap(out[i - 1], out[rng.uniform_index(i - 1)]);
  }
  return out;
}

inline SequenceViews draw_sequence_views(std::span<const ItemId> seq,
                                         const AugmentationPolicy& policy,
                                         std::size_t neg_count, ItemId mask_id, Rng& rng) {
  SequenceViews v;
  v.view1 = augment_sequence(seq, policy, mask_id, rng);
  v.view2 = augment_sequence(seq, policy, mask_id, rng);
  for (std::size_t j = 0; j < neg_count; ++j) v.negatives.push_back(derange(seq, rng));
  return v;
}

inline double sequence_view_loss_into(const ModelParams& params, const SequenceViews& views,
                                      double tau, ModelParams& grad, double scale) {
  const Encoding e1 = encode(params, views.view1);
  const Encoding e2 = encode(params, views.view2);
  std::vector<Encoding> negs;
  std::vector<Vec64> neg_h;
  for (const auto& s : views.negatives) {
    negs.push_back(encode(params, s));
    neg_h.push_back(negs.back().h);
  }
  InfoNceResult r = info_nce(e1.h, e2.h, neg_h, tau);
  if (neg_h.empty()) return 0.0;
  scale_in_place(r.grad_anchor.values(), scale);
  scale_in_place(r.grad_positive.values(), scale);
  backward_into(params, e1.trace, r.grad_anchor, grad);
  backward_into(params, e2.trace, r.grad_positive, grad);
  for (std::size_t j = 0; j < negs.size(); ++j) {
    scale_in_place(r.grad_negatives[j].values(), scale);
    backward_into(params, negs[j].trace, r.grad_negatives[j], grad);
  }
  return r.loss;
}

inline LossAndGrad sequence_view_loss(const ModelParams& params, std::span<const ItemId> seq,
                                      const AugmentationPolicy& policy, Rng& rng, double tau,
                                      std::size_t neg_count = 4) {
  const auto views =
      draw_sequence_views(seq, policy, neg_count, static_cast<ItemId>(params.num_items()), rng);
  LossAndGrad out{0.0, ModelParams(params.shape())};
  out.loss = sequence_view_loss_into(params, views, tau, out.grad, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// User view

// u' = u + eps1, u'' = u + eps2, negatives u + neg_eps[j]. Federated clients
// have no other users, so negatives are resamples with 4x the noise scale.
struct UserViewNoise {
  Vec64 eps1;
  Vec64 eps2;
  std::vector<Vec64> neg_eps;
};

inline UserViewNoise draw_user_noise(std::size_t dim, double sigma, std::size_t neg_count,
                                     Rng& rng) {
  auto draw = [&](double s) {
    Vec64 v(dim);
    for (double& x : v) x = rng.normal(0.0, s);
    return v;
  };
  UserViewNoise n;
  n.eps1 = draw(sigma);
  n.eps2 = draw(sigma);
  for (std::size_t j = 0; j < neg_count; ++j) n.neg_eps.push_back(draw(4.0 * sigma));
  return n;
}

inline double user_view_loss_into(const ModelParams& params, std::span<const ItemId> seq,
                                  const UserViewNoise& noise, double tau, ModelParams& grad,
                                  double scale) {
  if (noise.neg_eps.empty()) return 0.0;
  const Encoding e = encode(params, seq);
  const std::size_t d = params.dim();
  Vec64 u1 = e.h, u2 = e.h;
  axpy(1.0, noise.eps1, u1.values());
  axpy(1.0, noise.eps2, u2.values());
  std::vector<Vec64> negs;
  for (const Vec64& eps : noise.neg_eps) {
    Vec64 n = e.h;
    axpy(1.0, eps, n.values());
    negs.push_back(std::move(n));
  }
  const InfoNceResult r = info_nce(u1, u2, negs, tau);
  Vec64 gu(d);
  axpy(scale, r.grad_anchor, gu.values());
  axpy(scale, r.grad_positive, gu.values());
  for (const Vec64& g : r.grad_negatives) axpy(scale, g, gu.values());
  backward_into(params, e.trace, gu, grad);
  return r.loss;
}

inline LossAndGrad user_view_loss(const ModelParams& params, std::span<const ItemId> seq,
                                  double noise_sigma, double tau, Rng& rng,
                                  std::size_t neg_count = 4) {
  const auto noise = draw_user_noise(params.dim(), noise_sigma, neg_count, rng);
  LossAndGrad out{0.0, ModelParams(params.shape())};
  out.loss = user_view_loss_into(params, seq, noise, tau, out.grad, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Item view

// Per distinct item k of the sequence: v'_k = v_k + shift1_k and
// v''_k = v_k + shift2_k, with shift = step * dRec/dv_k + jitter. Shifts are
// constants for differentiation.
struct ItemViewPerturbation {
  ItemSeq items;
  std::vector<Vec64> shift1;
  std::vector<Vec64> shift2;
};

inline ItemSeq distinct_items(std::span<const ItemId> seq) {
  ItemSeq out;
  for (ItemId i : seq) {
    if (std::find(out.begin(), out.end(), i) == out.end()) out.push_back(i);
  }
  return out;
}

// `rec_grad` is the recommendation-loss gradient at the current parameters.
// Jitter is N(0, (0.1 * step)^2) and independent between the two views.
inline ItemViewPerturbation make_item_view_perturbation(std::span<const ItemId> seq,
                                                        const ModelParams& rec_grad,
                                                        double step, Rng& rng) {
  ItemViewPerturbation p;
  p.items = distinct_items(seq);
  const double jitter = 0.1 * step;
  for (ItemId k : p.items) {
    Vec64 base(rec_grad.embedding(k));
    scale_in_place(base.values(), step);
    Vec64 a = base, b = base;
    for (std::size_t i = 0; i < a.dim(); ++i) {
      a[i] += rng.normal(0.0, jitter);
      b[i] += rng.normal(0.0, jitter);
    }
    p.shift1.push_back(std::move(a));
    p.shift2.push_back(std::move(b));
  }
  return p;
}

// Mean over items of InfoNCE(v'_k, v''_k; {v''_j : j != k}).
inline double item_view_loss_into(const ModelParams& params, const ItemViewPerturbation& p,
                                  double tau, ModelParams& grad, double scale) {
  const std::size_t n = p.items.size();
  if (n < 2) return 0.0;
  std::vector<Vec64> first(n), second(n);
  for (std::size_t a = 0; a < n; ++a) {
    first[a] = Vec64(params.embedding(p.items[a]));
    second[a] = first[a];
    axpy(1.0, p.shift1[a], first[a].values());
    axpy(1.0, p.shift2[a], second[a].values());
  }
  const double w = scale / static_cast<double>(n);
  double total = 0.0;
  std::vector<Vec64> negs;
  negs.reserve(n - 1);
  for (std::size_t a = 0; a < n; ++a) {
    negs.clear();
    for (std::size_t b = 0; b < n; ++b) {
      if (b != a) negs.push_back(second[b]);
    }
    const InfoNceResult r = info_nce(first[a], second[a], negs, tau);
    total += r.loss;
    axpy(w, r.grad_anchor, grad.embedding(p.items[a]));
    axpy(w, r.grad_positive, grad.embedding(p.items[a]));
    std::size_t j = 0;
    for (std::size_t b = 0; b < n; ++b) {
      if (b != a) axpy(w, r.grad_negatives[j++], grad.embedding(p.items[b]));
    }
  }
  return total / static_cast<double>(n);
}

inline LossAndGrad item_view_loss(const ModelParams& params, std::span<const ItemId> seq,
                                  double item_view_step, double tau, Rng& rng) {
  LossAndGrad out{0.0, ModelParams(params.shape())};
  if (distinct_items(seq).size() < 2) return out;
  const LossAndGrad rec = rec_loss(params, seq);
  const auto pert = make_item_view_perturbation(seq, rec.grad, item_view_step, rng);
  out.loss = item_view_loss_into(params, pert, tau, out.grad, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Temporal consistency

inline double tcr_loss_into(const ModelParams& params, std::span<const ItemId> seq,
                            std::size_t window, ModelParams& grad, double scale) {
  const auto windows = adjacent_subsequences(seq, window);
  if (!windows) return 0.0;
  const Encoding a = encode(params, windows->first);
  const Encoding b = encode(params, windows->second);
  const std::size_t d = params.dim();
  Vec64 ga(d), gb(d);
  double loss = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a.h[i] - b.h[i];
    loss += diff * diff;
    ga[i] = 2.0 * scale * diff;
    gb[i] = -ga[i];
  }
  backward_into(params, a.trace, ga, grad);
  backward_into(params, b.trace, gb, grad);
  return loss;
}

inline LossAndGrad tcr_loss(const ModelParams& params, std::span<const ItemId> seq,
                            std::size_t window) {
  LossAndGrad out{0.0, ModelParams(params.shape())};
  out.loss = tcr_loss_into(params, seq, window, out.grad, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Local training

struct LossBreakdown {
  double rec = 0.0;
  double cl = 0.0;
  double tcr = 0.0;
  double total = 0.0;
};

struct LocalTrainResult {
  std::optional<ClientUpdate> update;
  std::vector<LossBreakdown> epochs;  // losses at the start of each step
  std::string failure;                // set when update is empty
};

inline std::uint64_t client_weight(std::span<const ItemId> train, WeightBy by) {
  return by == WeightBy::kInteractions ? train.size() : train.size() - 1;
}

// E full-sequence SGD steps on L_rec + lambda_cl * mean(seq, user, item views)
// + lambda_tcr * L_tcr. Augmentations, noise and jitter are drawn once per
// call; the item-view shift is recomputed from the current rec gradient each
// step. With both lambdas zero no random numbers are drawn.
inline LocalTrainResult local_train(const ModelParams& global, std::span<const ItemId> train,
                                    const ClientHyper& hyper, ClientId client_id,
                                    std::size_t round, Rng& rng) {
  LocalTrainResult result;
  if (hyper.local_epochs < 1) throw InvalidHyperparameter("local_epochs must be >= 1");
  if (train.size() < 2) {
    result.failure = "client " + std::to_string(client_id) + ": fewer than 2 train items";
    return result;
  }

  const ItemId mask_id = static_cast<ItemId>(global.num_items());
  const bool use_cl = hyper.lambda_cl > 0.0;
  const bool use_tcr = hyper.lambda_tcr > 0.0;

  SequenceViews views;
  UserViewNoise noise;
  std::vector<Vec64> jitter1, jitter2;
  ItemSeq items;
  if (use_cl) {
    views = draw_sequence_views(train, hyper.augmentation, hyper.neg_count, mask_id, rng);
    noise = draw_user_noise(global.dim(), hyper.noise_sigma, hyper.neg_count, rng);
    items = distinct_items(train);
    const double j = 0.1 * hyper.item_view_step;
    for (std::size_t a = 0; a < items.size(); ++a) {
      Vec64 z1(global.dim()), z2(global.dim());
      for (std::size_t i = 0; i < global.dim(); ++i) {
        z1[i] = rng.normal(0.0, j);
        z2[i] = rng.normal(0.0, j);
      }
      jitter1.push_back(std::move(z1));
      jitter2.push_back(std::move(z2));
    }
  }

  ModelParams params = global;
  ModelParams grad(global.shape());
  for (std::size_t e = 0; e < hyper.local_epochs; ++e) {
    grad.zero();
    LossBreakdown lb;
    lb.rec = rec_loss_into(params, train, grad, 1.0);
    if (use_cl) {
      ItemViewPerturbation pert;
      pert.items = items;
      for (std::size_t a = 0; a < items.size(); ++a) {
        Vec64 base(grad.embedding(items[a]));
        scale_in_place(base.values(), hyper.item_view_step);
        Vec64 s1 = base, s2 = base;
        axpy(1.0, jitter1[a], s1.values());
        axpy(1.0, jitter2[a], s2.values());
        pert.shift1.push_back(std::move(s1));
        pert.shift2.push_back(std::move(s2));
      }
      const double w = hyper.lambda_cl / 3.0;
      const double sc = sequence_view_loss_into(params, views, hyper.tau, grad, w);
      const double uc = user_view_loss_into(params, train, noise, hyper.tau, grad, w);
      const double ic = item_view_loss_into(params, pert, hyper.tau, grad, w);
      lb.cl = (sc + uc + ic) / 3.0;
    }
    if (use_tcr) {
      lb.tcr = tcr_loss_into(params, train, hyper.tcr_window, grad, hyper.lambda_tcr);
    }
    lb.total = lb.rec + hyper.lambda_cl * lb.cl + hyper.lambda_tcr * lb.tcr;
    result.epochs.push_back(lb);
    if (!std::isfinite(lb.total) || !grad.is_finite()) {
      result.failure = "client " + std::to_string(client_id) + ": non-finite loss in epoch " +
                       std::to_string(e + 1);
      return result;
    }
    clip_global_norm(grad.values(), hyper.clip_norm);
    params.add_scaled(-hyper.lr, grad);
  }
  if (!params.is_finite()) {
    result.failure = "client " + std::to_string(client_id) + ": non-finite parameters";
    return result;
  }

  ClientUpdate u;
  u.update.client_id = client_id;
  u.update.weight = client_weight(train, hyper.weight_by);
  u.update.params = std::move(params);
  u.provenance = Provenance::kBenign;
  u.round = round;
  result.update = std::move(u);
  return result;
}

}  // namespace fortress
