#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fortress/client.hpp"
#include "fortress/data.hpp"
#include "fortress/encoder.hpp"
#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

namespace fortress {

enum class AttackKind { kNone, kPromotion, kCamouflage };

struct AttackSpec {
  AttackKind kind = AttackKind::kNone;
  ItemSeq target_items;
  double malicious_fraction = 0.05;
  std::size_t pseudo_users_per_client = 8;
  std::size_t pseudo_seq_len = 24;
  std::size_t alt_item_count = 2;
  std::size_t camo_steps = 20;
  double camo_lr = 0.2;
  bool norm_match = false;

  bool operator==(const AttackSpec&) const = default;
};

inline void validate(const AttackSpec& s, std::size_t num_items) {
  if (s.malicious_fraction < 0.0 || s.malicious_fraction >= 1.0) {
    throw InvalidHyperparameter("malicious_fraction must lie in [0, 1)");
  }
  if (s.pseudo_users_per_client < 1) {
    throw InvalidHyperparameter("pseudo_users_per_client must be >= 1");
  }
  if (s.pseudo_seq_len < 2) throw InvalidHyperparameter("pseudo_seq_len must be >= 2");
  if (s.camo_steps < 1) throw InvalidHyperparameter("camo_steps must be >= 1");
  if (!(s.camo_lr > 0.0)) throw InvalidHyperparameter("camo_lr must be > 0");
  for (ItemId t : s.target_items) {
    if (t >= num_items) throw InvalidHyperparameter("target item out of range");
  }
}

// Number of attacker clients added next to `benign` honest ones so that they
// make up `fraction` of the whole population.
inline std::size_t malicious_client_count(std::size_t benign, double fraction) {
  if (fraction <= 0.0) return 0;
  return static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(benign) / (1.0 - fraction)));
}

// Knowledge handed to an attacker for one round.
struct AttackContext {
  // Popular items known to the attacker (top items by interaction count).
  std::span<const ItemId> popular_items;
  // Unnormalised sampling weights for plausible pseudo sequences; uniform
  // when empty.
  std::span<const double> item_prior;
  // Median benign update-delta norm of the previous round, when known.
  std::optional<double> reference_norm;
  // Local optimisation settings (epochs, lr, clipping) shared with benign
  // clients.
  const ClientHyper* hyper = nullptr;
};

// Top ceil(fraction * M) items by count, ties to the lower id; at least one.
inline ItemSeq most_popular_items(std::span<const std::uint64_t> counts, double fraction) {
  const std::size_t m = counts.size();
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m))), 1, m);
  ItemSeq ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](ItemId a, ItemId b) { return counts[a] > counts[b]; });
  ids.resize(k);
  return ids;
}

// `count` distinct targets drawn from the less popular half of the catalogue.
inline ItemSeq choose_target_items(std::span<const std::uint64_t> counts, std::size_t count,
                                   std::uint64_t seed) {
  const std::size_t m = counts.size();
  ItemSeq ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](ItemId a, ItemId b) { return counts[a] < counts[b]; });
  ItemSeq pool(ids.begin(), ids.begin() + std::max<std::size_t>(m / 2, count));
  Rng rng(seed);
  rng.shuffle(std::span<ItemId>(pool));
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

// Rescales (params - global) to `target_norm` in place.
inline void match_delta_norm(const ModelParams& global, ModelParams& params,
                             double target_norm) {
  ModelParams delta = params - global;
  const double n = delta.l2_norm();
  if (n == 0.0) return;
  params = global;
  params.add_scaled(target_norm / n, delta);
}

namespace detail {
inline ItemId draw_weighted(std::span<const double> prior, std::size_t m, Rng& rng) {
  if (prior.empty()) return static_cast<ItemId>(rng.uniform_index(m));
  double total = 0.0;
  for (double w : prior) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < prior.size(); ++i) {
    u -= prior[i];
    if (u < 0.0) return static_cast<ItemId>(i);
  }
  return static_cast<ItemId>(prior.size() - 1);
}
}  // namespace detail

// Promotion attack in the style of pseudo-user synthesis: plausible random
// sequences from the popularity prior, the target as next-item label at every
// position, and a few random "alternative" items as extra labels near the end
// of each sequence to push competitors down. The client reports the weight
// of a single user with a pseudo_seq_len history.
inline ClientUpdate promotion_update(const ModelParams& global, const AttackSpec& spec,
                                     const AttackContext& ctx, ClientId client_id,
                                     std::size_t round, Rng& rng) {
  if (spec.kind != AttackKind::kPromotion) {
    throw std::invalid_argument("promotion_update: spec.kind is not promotion");
  }
  if (spec.target_items.empty()) throw std::invalid_argument("promotion_update: no targets");
  if (ctx.hyper == nullptr) throw std::invalid_argument("promotion_update: missing hyper");
  const std::size_t m = global.num_items();
  const std::size_t d = global.dim();

  struct Pseudo {
    ItemSeq seq;
    ItemId target;
    ItemSeq alt;  // alt labels for the last alt.size() positions
  };
  std::vector<Pseudo> users;
  for (std::size_t p = 0; p < spec.pseudo_users_per_client; ++p) {
    Pseudo u;
    u.target = spec.target_items[p % spec.target_items.size()];
    for (std::size_t t = 0; t < spec.pseudo_seq_len; ++t) {
      u.seq.push_back(detail::draw_weighted(ctx.item_prior, m, rng));
    }
    const std::size_t alts = std::min(spec.alt_item_count, spec.pseudo_seq_len);
    for (std::size_t a = 0; a < alts; ++a) {
      u.alt.push_back(static_cast<ItemId>(rng.uniform_index(m)));
    }
    users.push_back(std::move(u));
  }

  ModelParams params = global;
  ModelParams grad(global.shape());
  std::vector<double> logits(m), g(m);
  for (std::size_t e = 0; e < ctx.hyper->local_epochs; ++e) {
    grad.zero();
    std::size_t terms = 0;
    for (const auto& u : users) terms += u.seq.size() + u.alt.size();
    const double w = 1.0 / static_cast<double>(terms);
    for (const auto& u : users) {
      const EncodeTrace tr = encode_trace(params, u.seq);
      std::vector<double> upstream(u.seq.size() * d, 0.0);
      const std::size_t alt_from = u.seq.size() - u.alt.size();
      for (std::size_t t = 0; t < u.seq.size(); ++t) {
        const auto o = tr.output_at(t);
        auto up = std::span<double>(upstream).subspan(t * d, d);
        score_items_into(params, o, logits);
        softmax_cross_entropy_into(logits, u.target, g);
        for (double& v : g) v *= w;
        score_items_backward_table(g, o, grad);
        score_items_backward_hidden(params, g, up);
        if (t >= alt_from) {
          softmax_cross_entropy_into(logits, u.alt[t - alt_from], g);
          for (double& v : g) v *= w;
          score_items_backward_table(g, o, grad);
          score_items_backward_hidden(params, g, up);
        }
      }
      backward_steps_into(params, tr, upstream, grad);
    }
    clip_global_norm(grad.values(), ctx.hyper->clip_norm);
    params.add_scaled(-ctx.hyper->lr, grad);
  }
  if (spec.norm_match && ctx.reference_norm) match_delta_norm(global, params, *ctx.reference_norm);

  ClientUpdate out;
  out.update.client_id = client_id;
  out.update.weight = spec.pseudo_seq_len;
  out.update.params = std::move(params);
  out.provenance = Provenance::kMalicious;
  out.round = round;
  return out;
}

// Camouflage attack in the style of hard-user mining: Gaussian hidden-state
// probes, keep the ones that rank each target lowest, then move only the
// target rows toward the popular-item centroid while closing the hard probes'
// score gap between popular items and the target.
inline ClientUpdate camouflage_update(const ModelParams& global, const AttackSpec& spec,
                                      const AttackContext& ctx, ClientId client_id,
                                      std::size_t round, Rng& rng) {
  if (spec.kind != AttackKind::kCamouflage) {
    throw std::invalid_argument("camouflage_update: spec.kind is not camouflage");
  }
  if (ctx.popular_items.empty()) {
    throw std::invalid_argument("camouflage_update: attack requires a popular item set");
  }
  if (spec.target_items.empty()) throw std::invalid_argument("camouflage_update: no targets");
  const std::size_t m = global.num_items();
  const std::size_t d = global.dim();
  const double probe_scale = 1.0 / std::sqrt(static_cast<double>(d));

  Vec64 centroid(d);
  for (ItemId k : ctx.popular_items) axpy(1.0, global.embedding(k), centroid.values());
  scale_in_place(centroid.values(), 1.0 / static_cast<double>(ctx.popular_items.size()));

  ModelParams params = global;
  std::vector<double> logits(m);
  for (ItemId target : spec.target_items) {
    // Mine hard probes: those where the target ranks lowest.
    const std::size_t keep = spec.pseudo_users_per_client;
    std::vector<std::pair<std::size_t, Vec64>> candidates;
    for (std::size_t c = 0; c < 4 * keep; ++c) {
      Vec64 h(d);
      for (double& x : h) x = rng.normal(0.0, probe_scale);
      score_items_into(global, h, logits);
      std::size_t rank = 0;
      for (std::size_t k = 0; k < m; ++k) rank += logits[k] > logits[target];
      candidates.emplace_back(rank, std::move(h));
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    candidates.resize(keep);

    auto row = params.embedding(target);
    Vec64 g(d);
    for (std::size_t step = 0; step < spec.camo_steps; ++step) {
      for (std::size_t i = 0; i < d; ++i) g[i] = 2.0 * (row[i] - centroid[i]);
      for (const auto& [rank, h] : candidates) {
        double popular_score = 0.0;
        for (ItemId k : ctx.popular_items) popular_score += dot(h, global.embedding(k));
        popular_score /= static_cast<double>(ctx.popular_items.size());
        if (popular_score - dot(h, row) > 0.0) {
          axpy(-1.0 / static_cast<double>(keep), h, g.values());
        }
      }
      axpy(-spec.camo_lr, g, row);
    }
  }
  if (spec.norm_match && ctx.reference_norm) match_delta_norm(global, params, *ctx.reference_norm);

  ClientUpdate out;
  out.update.client_id = client_id;
  out.update.weight = spec.pseudo_seq_len;
  out.update.params = std::move(params);
  out.provenance = Provenance::kMalicious;
  out.round = round;
  return out;
}

}  // namespace fortress
