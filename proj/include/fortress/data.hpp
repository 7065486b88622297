#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fortress/numerics.hpp"
#include "fortress/rng.hpp"

namespace fortress {

using ItemId = std::uint32_t;
using UserId = std::uint32_t;
using ItemSeq = std::vector<ItemId>;

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interaction {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  std::int64_t timestamp = 0;
};

enum class SplitMark : std::uint8_t { kTrain, kValidTarget, kTestTarget };

struct InteractionSequence {
  UserId user_id = 0;
  ItemSeq items;
  // Empty until leave_one_out_split marks the sequence.
  std::vector<SplitMark> split;

  bool has_split() const { return !split.empty(); }

  // Items before the validation target (the whole sequence when unsplit).
  std::span<const ItemId> train() const {
    return has_split() ? std::span<const ItemId>(items).first(items.size() - 2)
                       : std::span<const ItemId>(items);
  }
  // Everything the model may see when predicting the test target.
  std::span<const ItemId> history() const {
    return has_split() ? std::span<const ItemId>(items).first(items.size() - 1)
                       : std::span<const ItemId>(items);
  }
  ItemId valid_target() const { return items[items.size() - 2]; }
  ItemId test_target() const { return items.back(); }

  bool operator==(const InteractionSequence&) const = default;
};

struct Dataset {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  // Indexed by user id.
  std::vector<InteractionSequence> sequences;
  // Users removed at load time for being too short.
  std::size_t dropped_users = 0;

  // The reserved mask token's embedding row.
  ItemId mask_id() const { return static_cast<ItemId>(num_items); }

  bool operator==(const Dataset&) const = default;
};

// Interaction counts per item over each user's visible history.
inline std::vector<std::uint64_t> item_counts(const Dataset& ds) {
  std::vector<std::uint64_t> counts(ds.num_items, 0);
  for (const auto& s : ds.sequences) {
    for (ItemId i : s.history()) ++counts[i];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct LoadOptions {
  std::size_t min_length = 3;
  // Keep only the most recent interactions; 0 disables truncation.
  std::size_t max_seq_len = 50;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline bool parse_int(std::string_view s, std::int64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace detail

inline Dataset load_interactions(std::istream& in, const LoadOptions& opts = {}) {
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  struct Row {
    Interaction x;
    std::size_t order;
  };
  std::map<std::int64_t, std::vector<Row>> by_user;
  std::size_t order = 0;

  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = detail::trim(line);
    if (line_no == 1 && view.starts_with("\xEF\xBB\xBF")) view.remove_prefix(3);
    if (!saw_header) {
      if (view != "user_id,item_id,timestamp") {
        throw ParseError("line 1: expected header 'user_id,item_id,timestamp'");
      }
      saw_header = true;
      continue;
    }
    if (view.empty()) continue;

    Interaction x;
    std::int64_t* fields[3] = {&x.user_id, &x.item_id, &x.timestamp};
    std::size_t start = 0;
    for (int f = 0; f < 3; ++f) {
      const std::size_t comma = view.find(',', start);
      const bool last = f == 2;
      if (last != (comma == std::string_view::npos)) {
        throw ParseError("line " + std::to_string(line_no) + ": expected 3 fields");
      }
      const auto token = view.substr(start, last ? std::string_view::npos : comma - start);
      if (!detail::parse_int(token, *fields[f])) {
        throw ParseError("line " + std::to_string(line_no) + ": malformed integer '" +
                         std::string(token) + "'");
      }
      start = comma + 1;
    }
    if (x.user_id < 0 || x.item_id < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": negative id");
    }
    by_user[x.user_id].push_back({x, order++});
  }
  if (!saw_header) throw ParseError("line 1: missing header");

  Dataset ds;
  std::map<std::int64_t, ItemId> item_index;
  for (auto it = by_user.begin(); it != by_user.end();) {
    if (it->second.size() < opts.min_length) {
      ++ds.dropped_users;
      it = by_user.erase(it);
    } else {
      for (const Row& r : it->second) item_index.emplace(r.x.item_id, 0);
      ++it;
    }
  }
  if (by_user.empty()) throw EmptyDatasetError("no users left after filtering");

  ItemId next = 0;
  for (auto& [raw, dense] : item_index) dense = next++;
  ds.num_items = item_index.size();

  for (auto& [raw_user, rows] : by_user) {
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      return a.x.timestamp < b.x.timestamp;
    });
    InteractionSequence seq;
    seq.user_id = static_cast<UserId>(ds.sequences.size());
    std::size_t first = 0;
    if (opts.max_seq_len > 0 && rows.size() > opts.max_seq_len) {
      first = rows.size() - opts.max_seq_len;
    }
    for (std::size_t i = first; i < rows.size(); ++i) {
      seq.items.push_back(item_index.at(rows[i].x.item_id));
    }
    ds.sequences.push_back(std::move(seq));
  }
  ds.num_users = ds.sequences.size();
  return ds;
}

inline Dataset load_interactions(const std::string& path, const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  return load_interactions(in, opts);
}

// Writes the dataset as `user_id,item_id,timestamp` with the position in the
// sequence as timestamp.
inline void write_interactions(std::ostream& out, const Dataset& ds) {
  out << "user_id,item_id,timestamp\n";
  for (const auto& s : ds.sequences) {
    for (std::size_t t = 0; t < s.items.size(); ++t) {
      out << s.user_id << ',' << s.items[t] << ',' << t << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthParams {
  std::size_t num_users = 200;
  std::size_t num_items = 200;
  std::size_t min_length = 8;
  std::size_t max_length = 24;
  // Probability mass on each item's designated successor.
  double transition_skew = 0.8;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 1;

  bool operator==(const SynthParams&) const = default;
};

// Order-1 Markov sequences over a random successor cycle. With probability
// `transition_skew` the next item is the current item's designated successor;
// otherwise it is drawn from a Zipf popularity prior that ignores the current
// item. Items never repeat within a sequence. After the integer weights and
// threshold are fixed, all sampling uses integer arithmetic only.
inline Dataset synth_generate(const SynthParams& p) {
  if (p.num_items < 10) throw InvalidHyperparameter("synth_generate: num_items must be >= 10");
  if (p.transition_skew < 0.0 || p.transition_skew > 1.0) {
    throw InvalidHyperparameter("synth_generate: transition_skew must lie in [0, 1]");
  }
  if (p.min_length < 3 || p.max_length < p.min_length) {
    throw InvalidHyperparameter("synth_generate: need 3 <= min_length <= max_length");
  }
  const std::size_t m = p.num_items;
  const std::size_t max_len = std::min(p.max_length, m);
  const std::size_t min_len = std::min(p.min_length, max_len);
  Rng rng(derive_seed({p.seed, 0x5347ULL}));

  // Popularity rank of each item is a random permutation.
  std::vector<ItemId> by_rank(m);
  for (std::size_t i = 0; i < m; ++i) by_rank[i] = static_cast<ItemId>(i);
  rng.shuffle(std::span<ItemId>(by_rank));
  std::vector<std::uint64_t> cumulative(m);
  std::vector<std::uint64_t> weight(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double w = 1e9 / std::pow(static_cast<double>(r + 1), p.zipf_exponent);
    weight[by_rank[r]] = static_cast<std::uint64_t>(std::llround(std::max(w, 1.0)));
  }
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < m; ++i) cumulative[i] = (total += weight[i]);
  auto draw_popular = [&] {
    const std::uint64_t u = rng.uniform_index(total);
    return static_cast<ItemId>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                               cumulative.begin());
  };

  // Sattolo's algorithm: a single cycle, so no item is its own successor.
  std::vector<ItemId> successor(m);
  for (std::size_t i = 0; i < m; ++i) successor[i] = static_cast<ItemId>(i);
  for (std::size_t i = m - 1; i > 0; --i) {
    std::swap(successor[i], successor[rng.uniform_index(i)]);
  }

  const auto threshold =
      static_cast<std::uint64_t>(std::llround(p.transition_skew * 4294967296.0));

  Dataset ds;
  ds.num_users = p.num_users;
  ds.num_items = m;
  ds.sequences.resize(p.num_users);
  std::vector<char> seen(m);
  for (std::size_t u = 0; u < p.num_users; ++u) {
    auto& seq = ds.sequences[u];
    seq.user_id = static_cast<UserId>(u);
    const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
    std::fill(seen.begin(), seen.end(), 0);
    ItemId cur = draw_popular();
    seq.items.push_back(cur);
    seen[cur] = 1;
    while (seq.items.size() < len) {
      ItemId next = successor[cur];
      if (static_cast<std::uint64_t>(rng.next_u32()) >= threshold || seen[next]) {
        do {
          next = draw_popular();
        } while (seen[next]);
      }
      seq.items.push_back(next);
      seen[next] = 1;
      cur = next;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Leave-one-out

struct SplitReport {
  Dataset dataset;
  std::size_t skipped = 0;
};

// Marks the last item as test target and the second-to-last as validation
// target. Sequences shorter than 3 stay unsplit and are counted in `skipped`.
inline SplitReport leave_one_out_split(const Dataset& in) {
  SplitReport out{in, 0};
  for (auto& s : out.dataset.sequences) {
    s.split.clear();
    if (s.items.size() < 3) {
      ++out.skipped;
      continue;
    }
    s.split.assign(s.items.size(), SplitMark::kTrain);
    s.split[s.items.size() - 2] = SplitMark::kValidTarget;
    s.split.back() = SplitMark::kTestTarget;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationPolicy {
  double crop_prob = 0.3;
  double mask_prob = 0.3;
  double reorder_prob = 0.3;
  double crop_ratio = 0.6;
  double mask_ratio = 0.3;
  std::size_t reorder_window = 3;

  static AugmentationPolicy identity() { return {0.0, 0.0, 0.0, 1.0, 0.1, 1}; }

  bool operator==(const AugmentationPolicy&) const = default;
};

inline void validate(const AugmentationPolicy& p, bool allow_identity = true) {
  auto prob = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!prob(p.crop_prob) || !prob(p.mask_prob) || !prob(p.reorder_prob)) {
    throw InvalidHyperparameter("augmentation probabilities must lie in [0, 1]");
  }
  if (!(p.crop_ratio > 0.0 && p.crop_ratio <= 1.0)) {
    throw InvalidHyperparameter("crop_ratio must lie in (0, 1]");
  }
  if (!(p.mask_ratio > 0.0 && p.mask_ratio <= 1.0)) {
    throw InvalidHyperparameter("mask_ratio must lie in (0, 1]");
  }
  if (p.reorder_window < 1) throw InvalidHyperparameter("reorder_window must be >= 1");
  if (!allow_identity && p.crop_prob == 0.0 && p.mask_prob == 0.0 && p.reorder_prob == 0.0) {
    throw InvalidHyperparameter("augmentation policy needs at least one probability > 0");
  }
}

// Crop, then mask, then reorder, each gated by its own probability. The
// three gate draws happen on every call so the rng stream advances by a
// fixed amount regardless of policy.
inline ItemSeq augment_sequence(std::span<const ItemId> seq, const AugmentationPolicy& policy,
                                ItemId mask_id, Rng& rng) {
  ItemSeq out(seq.begin(), seq.end());
  if (out.size() < 2) return out;

  if (rng.bernoulli(policy.crop_prob)) {
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(policy.crop_ratio * out.size())));
    if (keep < out.size()) {
      const std::size_t start = rng.uniform_index(out.size() - keep + 1);
      out = ItemSeq(out.begin() + start, out.begin() + start + keep);
    }
  }
  if (rng.bernoulli(policy.mask_prob)) {
    const auto count = std::min<std::size_t>(
        out.size(), static_cast<std::size_t>(std::ceil(policy.mask_ratio * out.size())));
    std::vector<std::size_t> pos(out.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    // Partial Fisher-Yates picks `count` distinct positions.
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(pos[i], pos[i + rng.uniform_index(pos.size() - i)]);
      out[pos[i]] = mask_id;
    }
  }
  if (rng.bernoulli(policy.reorder_prob)) {
    const std::size_t w = std::min(policy.reorder_window, out.size());
    if (w > 1) {
      const std::size_t start = rng.uniform_index(out.size() - w + 1);
      rng.shuffle(std::span<ItemId>(out).subspan(start, w));
    }
  }
  return out;
}

// Two windows offset by one step, taken from the sequence tail. The window
// shrinks to len-1 for short sequences; nullopt when len < 2.
inline std::optional<std::pair<ItemSeq, ItemSeq>> adjacent_subsequences(
    std::span<const ItemId> seq, std::size_t window) {
  if (seq.size() < 2 || window == 0) return std::nullopt;
  const std::size_t w = std::min(window, seq.size() - 1);
  const std::size_t n = seq.size();
  return std::pair{ItemSeq(seq.begin() + (n - w - 1), seq.begin() + (n - 1)),
                   ItemSeq(seq.begin() + (n - w), seq.end())};
}

}  // namespace fortress
