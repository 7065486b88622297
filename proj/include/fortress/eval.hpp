#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fortress/data.hpp"
#include "fortress/encoder.hpp"
#include "fortress/numerics.hpp"

namespace fortress {

struct RankingResult {
  UserId user_id = 0;
  ItemSeq ranked;      // best first, no excluded items
  ItemId test_target = 0;
  // 1-based rank of the test target in the full filtered ranking; absent when
  // the target is excluded.
  std::optional<std::size_t> target_rank;
  ItemSeq excluded;    // sorted: the items the user has consumed
  bool clamped = false;  // K was reduced to the number of rankable items

  bool operator==(const RankingResult&) const = default;
};

// Ranks items by score, skipping `exclude`; ties go to the lower item id.
inline RankingResult rank_from_scores(std::span<const double> scores, std::size_t k,
                                      std::span<const ItemId> exclude, ItemId test_target,
                                      UserId user_id = 0) {
  const std::size_t m = scores.size();
  RankingResult r;
  r.user_id = user_id;
  r.test_target = test_target;
  r.excluded.assign(exclude.begin(), exclude.end());
  std::sort(r.excluded.begin(), r.excluded.end());
  r.excluded.erase(std::unique(r.excluded.begin(), r.excluded.end()), r.excluded.end());

  auto is_excluded = [&](ItemId i) {
    return std::binary_search(r.excluded.begin(), r.excluded.end(), i);
  };
  ItemSeq candidates;
  candidates.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (!is_excluded(static_cast<ItemId>(i))) candidates.push_back(static_cast<ItemId>(i));
  }
  if (k > candidates.size()) {
    k = candidates.size();
    r.clamped = true;
  }
  auto better = [&](ItemId a, ItemId b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end(), better);
  r.ranked.assign(candidates.begin(), candidates.begin() + k);

  if (test_target < m && !is_excluded(test_target)) {
    std::size_t rank = 1;
    for (std::size_t i = 0; i < m; ++i) {
      const auto id = static_cast<ItemId>(i);
      if (id != test_target && !is_excluded(id) && better(id, test_target)) ++rank;
    }
    r.target_rank = rank;
  }
  return r;
}

inline RankingResult top_k(const ModelParams& params, std::span<const ItemId> history,
                           std::size_t k, std::span<const ItemId> exclude, ItemId test_target,
                           UserId user_id = 0) {
  const Encoding e = encode(params, history);
  const Vec64 scores = score_items(params, e.h);
  return rank_from_scores(scores, k, exclude, test_target, user_id);
}

inline double hr_at_k(std::span<const RankingResult> results, std::size_t k) {
  if (results.empty()) throw std::invalid_argument("hr_at_k: no results");
  std::size_t hits = 0;
  for (const auto& r : results) hits += r.target_rank && *r.target_rank <= k;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline double ndcg_at_k(std::span<const RankingResult> results, std::size_t k) {
  if (results.empty()) throw std::invalid_argument("ndcg_at_k: no results");
  double total = 0.0;
  for (const auto& r : results) {
    if (r.target_rank && *r.target_rank <= k) {
      total += 1.0 / std::log2(1.0 + static_cast<double>(*r.target_rank));
    }
  }
  return total / static_cast<double>(results.size());
}

// Per-target exposure: among users that have not consumed the target, the
// fraction whose top-K contains it. nullopt when no user is eligible.
inline std::vector<std::optional<double>> er_per_target(std::span<const RankingResult> results,
                                                        std::span<const ItemId> targets,
                                                        std::size_t k) {
  std::vector<std::optional<double>> out;
  for (ItemId t : targets) {
    std::size_t eligible = 0, exposed = 0;
    for (const auto& r : results) {
      if (std::binary_search(r.excluded.begin(), r.excluded.end(), t)) continue;
      if (r.ranked.size() < k && !r.clamped) {
        throw std::invalid_argument("er_at_k: ranking shorter than K");
      }
      ++eligible;
      const auto end = r.ranked.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.ranked.size()));
      exposed += std::find(r.ranked.begin(), end, t) != end;
    }
    if (eligible == 0) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(static_cast<double>(exposed) / static_cast<double>(eligible));
    }
  }
  return out;
}

// Mean of per-target exposure; targets with no eligible user are left out.
inline double er_at_k(std::span<const RankingResult> results, std::span<const ItemId> targets,
                      std::size_t k) {
  if (targets.empty()) throw std::invalid_argument("er_at_k: no targets");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : er_per_target(results, targets, k)) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation

struct EvalSummary {
  std::vector<std::size_t> ks;
  std::vector<double> hr;
  std::vector<double> ndcg;
  // er[i][j]: ER@ks[i] for targets[j]; nullopt when no user is eligible.
  std::vector<std::vector<std::optional<double>>> er;
  std::vector<double> er_mean;  // per K
  double tcr_drift = 0.0;       // mean ||f(S_t) - f(S_t+1)||_2 over users
  std::size_t users = 0;
};

// Rankings for every split user: history = train + validation target,
// excluded = history, target = test item.
inline std::vector<RankingResult> rank_users(const ModelParams& params, const Dataset& ds,
                                             std::size_t k) {
  std::vector<RankingResult> out;
  for (const auto& s : ds.sequences) {
    if (!s.has_split()) continue;
    out.push_back(top_k(params, s.history(), k, s.history(), s.test_target(), s.user_id));
  }
  return out;
}

// Global popularity ranker over the same protocol.
inline std::vector<RankingResult> rank_users_by_popularity(const Dataset& ds, std::size_t k) {
  const auto counts = item_counts(ds);
  std::vector<double> scores(counts.begin(), counts.end());
  std::vector<RankingResult> out;
  for (const auto& s : ds.sequences) {
    if (!s.has_split()) continue;
    out.push_back(rank_from_scores(scores, k, s.history(), s.test_target(), s.user_id));
  }
  return out;
}

inline double mean_adjacent_drift(const ModelParams& params, const Dataset& ds,
                                  std::size_t window) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : ds.sequences) {
    const auto w = adjacent_subsequences(s.history(), window);
    if (!w) continue;
    const Encoding a = encode(params, w->first);
    const Encoding b = encode(params, w->second);
    total += std::sqrt(squared_distance(a.h, b.h));
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

inline EvalSummary summarize(std::span<const RankingResult> results,
                             std::span<const std::size_t> ks, std::span<const ItemId> targets) {
  EvalSummary s;
  s.ks.assign(ks.begin(), ks.end());
  s.users = results.size();
  for (std::size_t k : ks) {
    s.hr.push_back(hr_at_k(results, k));
    s.ndcg.push_back(ndcg_at_k(results, k));
    if (!targets.empty()) {
      s.er.push_back(er_per_target(results, targets, k));
      s.er_mean.push_back(er_at_k(results, targets, k));
    }
  }
  return s;
}

inline EvalSummary evaluate(const ModelParams& params, const Dataset& ds,
                            std::span<const std::size_t> ks, std::span<const ItemId> targets,
                            std::size_t tcr_window) {
  if (ks.empty()) throw std::invalid_argument("evaluate: no K values");
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  const auto results = rank_users(params, ds, kmax);
  EvalSummary s = summarize(results, ks, targets);
  s.tcr_drift = mean_adjacent_drift(params, ds, tcr_window);
  return s;
}

}  // namespace fortress
