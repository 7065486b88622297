#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fortress/attacks.hpp"
#include "fortress/checkpoint.hpp"
#include "fortress/client.hpp"
#include "fortress/config.hpp"
#include "fortress/data.hpp"
#include "fortress/encoder.hpp"
#include "fortress/eval.hpp"
#include "fortress/rng.hpp"
#include "fortress/server.hpp"

namespace fortress {

// Raised when the aggregate turns non-finite; the message names the round and
// the dump file.
class HaltError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RoundReport {
  std::size_t round = 0;
  std::uint64_t seed_fingerprint = 0;
  std::size_t sampled = 0;
  std::size_t malicious = 0;
  std::size_t failed = 0;
  // Means over benign clients of the loss at the start of local training.
  double rec = 0.0;
  double cl = 0.0;
  double tcr = 0.0;
  double sep = 0.0;
  double var = 0.0;
  std::size_t hot_size = 0;
  std::size_t sp_size = 0;
  std::size_t backtracks = 0;
  ItemSeq suspicious;  // V_sp after this round
  std::optional<EvalSummary> eval;
  double wall_seconds = 0.0;  // kept out of metrics.jsonl
};

// One JSON object per round. Keys are emitted in a fixed order; ER fields
// appear only when targets are configured.
inline nlohmann::ordered_json to_json(const RoundReport& r, std::span<const ItemId> targets) {
  nlohmann::ordered_json j;
  j["round"] = r.round;
  char fp[20];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(r.seed_fingerprint));
  j["seed_fingerprint"] = fp;
  j["sampled"] = r.sampled;
  j["malicious"] = r.malicious;
  j["failed"] = r.failed;
  j["loss_rec"] = r.rec;
  j["loss_cl"] = r.cl;
  j["loss_tcr"] = r.tcr;
  j["loss_sep"] = r.sep;
  j["loss_var"] = r.var;
  j["hot_size"] = r.hot_size;
  j["sp_size"] = r.sp_size;
  j["backtracks"] = r.backtracks;
  if (!targets.empty()) {
    std::size_t flagged = 0;
    for (ItemId t : targets) {
      flagged += std::find(r.suspicious.begin(), r.suspicious.end(), t) != r.suspicious.end();
    }
    j["targets_flagged"] = flagged;
  }
  if (r.eval) {
    const EvalSummary& e = *r.eval;
    nlohmann::ordered_json ev;
    ev["users"] = e.users;
    for (std::size_t i = 0; i < e.ks.size(); ++i) {
      const std::string k = std::to_string(e.ks[i]);
      ev["hr@" + k] = e.hr[i];
      ev["ndcg@" + k] = e.ndcg[i];
    }
    if (!targets.empty() && !e.er.empty()) {
      for (std::size_t i = 0; i < e.ks.size(); ++i) {
        const std::string k = std::to_string(e.ks[i]);
        nlohmann::ordered_json per;
        for (std::size_t t = 0; t < targets.size(); ++t) {
          const auto& v = e.er[i][t];
          per[std::to_string(targets[t])] = v ? nlohmann::ordered_json(*v) : nullptr;
        }
        ev["er@" + k] = per;
        ev["er_mean@" + k] = e.er_mean[i];
      }
    }
    ev["tcr_drift"] = e.tcr_drift;
    j["eval"] = ev;
  }
  return j;
}

// Data and derived attack knowledge shared by every round.
struct Experiment {
  ExperimentConfig config;
  Dataset dataset;  // leave-one-out split
  std::size_t skipped_users = 0;
  ItemSeq targets;
  ItemSeq popular;
  std::vector<double> item_prior;
  std::size_t benign = 0;
  std::size_t malicious = 0;

  ModelShape shape() const { return {dataset.num_items, config.model.dim}; }
};

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.data.source == DataSource::kCsv) {
    LoadOptions opts;
    opts.max_seq_len = cfg.data.max_seq_len;
    return load_interactions(cfg.data.path, opts);
  }
  return synth_generate(cfg.data.synth);
}

inline Experiment prepare_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  Experiment ex;
  ex.config = cfg;
  SplitReport split = leave_one_out_split(load_dataset(cfg));
  ex.dataset = std::move(split.dataset);
  ex.skipped_users = split.skipped;
  const std::size_t m = ex.dataset.num_items;
  const auto counts = item_counts(ex.dataset);

  ex.targets = cfg.attack.spec.target_items;
  if (ex.targets.empty() && cfg.attack.num_targets > 0) {
    ex.targets = choose_target_items(
        counts, cfg.attack.num_targets,
        derive_seed({cfg.run.seed, static_cast<std::uint64_t>(SeedStream::kTargets)}));
  }
  for (ItemId t : ex.targets) {
    if (t >= m) throw ConfigError("attack.targets: item " + std::to_string(t) + " out of range");
  }
  ex.config.attack.spec.target_items = ex.targets;
  ex.popular = most_popular_items(counts, cfg.attack.popular_fraction);
  ex.item_prior.assign(counts.begin(), counts.end());
  ex.benign = ex.dataset.sequences.size();
  if (cfg.attack.spec.kind != AttackKind::kNone) {
    ex.malicious = malicious_client_count(ex.benign, cfg.attack.spec.malicious_fraction);
  }
  return ex;
}

struct RunOptions {
  std::optional<std::string> resume_from;
  // Write metrics.jsonl, timing.jsonl, config.echo and checkpoints to out_dir.
  bool write_files = true;
  // Stop after this round (simulates an interrupted run).
  std::optional<std::size_t> stop_after;
  std::function<void(const RoundReport&)> on_round;
  // Sees the server state at the end of each round.
  std::function<void(std::size_t round, const ModelParams&, const PopularityState&)> on_state;
};

struct RunResult {
  std::vector<RoundReport> reports;
  ModelParams params;
  PopularityState state;
  ItemSeq targets;
};

namespace runner_detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline std::string checkpoint_path(const std::string& dir, std::size_t round) {
  char name[32];
  std::snprintf(name, sizeof name, "round_%05zu.ckpt", round);
  return (std::filesystem::path(dir) / "checkpoints" / name).string();
}

// Keeps metrics lines with round <= `round` so a resumed run rewrites the
// same stream an uninterrupted run would have produced.
inline void truncate_metrics(const std::string& path, std::size_t round) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("round").get<std::size_t>() <= round) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

inline void dump_halt(const std::string& dir, std::size_t round,
                      std::span<const ServerUpdate> updates, const ModelParams& global,
                      const ModelParams& aggregate_params) {
  nlohmann::ordered_json j;
  j["round"] = round;
  j["global_finite"] = global.is_finite();
  j["aggregate_finite"] = aggregate_params.is_finite();
  std::size_t bad = 0;
  for (double v : aggregate_params.values()) bad += !std::isfinite(v);
  j["aggregate_nonfinite_entries"] = bad;
  nlohmann::ordered_json clients = nlohmann::ordered_json::array();
  for (const auto& u : updates) {
    nlohmann::ordered_json c;
    c["client_id"] = u.client_id;
    c["weight"] = u.weight;
    c["finite"] = u.params.is_finite();
    const double n = (u.params - global).l2_norm();
    c["delta_norm"] = std::isfinite(n) ? nlohmann::ordered_json(n) : nullptr;
    clients.push_back(c);
  }
  j["clients"] = clients;
  std::ofstream out(std::filesystem::path(dir) / ("halt_round_" + std::to_string(round) + ".json"));
  out << j.dump(2) << '\n';
}

}  // namespace runner_detail

// The federated round loop: sample, local training (attackers substitute
// their crafted updates), FedAvg, popularity update, defense step, periodic
// evaluation and checkpointing. Every random draw is keyed by (seed, round,
// client), so results do not depend on thread count or on resumption.
inline RunResult run_experiment(const Experiment& ex, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  const ExperimentConfig& cfg = ex.config;
  const std::uint64_t seed = cfg.run.seed;
  const std::uint64_t hash = config_hash(cfg);
  const std::string& out_dir = cfg.run.out_dir;

  RunResult res;
  res.targets = ex.targets;
  std::size_t start_round = 0;
  std::optional<double> reference_norm;
  ModelParams params;
  PopularityState state = PopularityState::empty(ex.dataset.num_items);
  if (opts.resume_from) {
    Checkpoint c = load_checkpoint(*opts.resume_from, hash, ex.shape());
    start_round = c.round;
    params = std::move(c.params);
    if (!c.state.magnitude.empty()) state = std::move(c.state);
    reference_norm = c.reference_norm;
  } else {
    params = init_params(ex.shape(),
                         derive_seed({seed, static_cast<std::uint64_t>(SeedStream::kInit)}));
  }

  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  const std::string timing_path = (fs::path(out_dir) / "timing.jsonl").string();
  std::ofstream metrics, timing;
  if (opts.write_files) {
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    std::ofstream(fs::path(out_dir) / "config.echo") << echo_config(cfg);
    if (opts.resume_from) {
      runner_detail::truncate_metrics(metrics_path, start_round);
      runner_detail::truncate_metrics(timing_path, start_round);
      metrics.open(metrics_path, std::ios::app);
      timing.open(timing_path, std::ios::app);
    } else {
      metrics.open(metrics_path, std::ios::trunc);
      timing.open(timing_path, std::ios::trunc);
    }
  }

  const std::size_t last_round =
      opts.stop_after ? std::min(*opts.stop_after, cfg.run.rounds) : cfg.run.rounds;
  for (std::size_t t = start_round + 1; t <= last_round; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundReport rep;
    rep.round = t;
    rep.seed_fingerprint = derive_seed({seed, t});

    const bool attack_live = ex.malicious > 0 && t >= cfg.attack.start_round;
    std::vector<ClientId> pool(ex.benign + (attack_live ? ex.malicious : 0));
    std::iota(pool.begin(), pool.end(), 0);
    Rng srng(sampling_seed(seed, t));
    const auto sampled = sample_clients(pool, cfg.run.client_fraction, srng);
    rep.sampled = sampled.size();

    AttackContext actx;
    actx.popular_items = ex.popular;
    actx.item_prior = ex.item_prior;
    actx.reference_norm = reference_norm;
    actx.hyper = &cfg.client;

    std::vector<LocalTrainResult> results(sampled.size());
    runner_detail::parallel_for(sampled.size(), cfg.run.threads, [&](std::size_t i) {
      const ClientId id = sampled[i];
      if (id < ex.benign) {
        Rng crng(client_seed(seed, t, id));
        results[i] = local_train(params, ex.dataset.sequences[id].train(), cfg.client, id, t, crng);
      } else {
        Rng arng(derive_seed({seed, static_cast<std::uint64_t>(SeedStream::kAttack), t, id}));
        results[i].update = cfg.attack.spec.kind == AttackKind::kPromotion
                                ? promotion_update(params, cfg.attack.spec, actx, id, t, arng)
                                : camouflage_update(params, cfg.attack.spec, actx, id, t, arng);
      }
    });

    std::vector<ServerUpdate> updates;
    std::vector<double> benign_norms;
    std::size_t benign_ok = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      auto& r = results[i];
      if (!r.update) {
        ++rep.failed;
        continue;
      }
      if (r.update->provenance == Provenance::kMalicious) {
        ++rep.malicious;
      } else {
        const LossBreakdown& lb = r.epochs.front();
        rep.rec += lb.rec;
        rep.cl += lb.cl;
        rep.tcr += lb.tcr;
        ++benign_ok;
        benign_norms.push_back((r.update->update.params - params).l2_norm());
      }
      updates.push_back(std::move(r.update->update));
    }
    if (benign_ok > 0) {
      rep.rec /= static_cast<double>(benign_ok);
      rep.cl /= static_cast<double>(benign_ok);
      rep.tcr /= static_cast<double>(benign_ok);
      reference_norm = runner_detail::median(benign_norms);
    }

    if (!updates.empty()) {
      ModelParams agg = aggregate(updates);
      if (!agg.is_finite()) {
        if (opts.write_files) runner_detail::dump_halt(out_dir, t, updates, params, agg);
        throw HaltError("non-finite aggregate at round " + std::to_string(t) +
                        (opts.write_files ? "; see halt_round_" + std::to_string(t) + ".json" : ""));
      }
      state = update_popularity(state, params, updates, agg, cfg.defense);
      DefenseResult def = defense_step(agg, state, cfg.defense);
      rep.hot_size = def.diagnostics.hot_size;
      rep.sp_size = def.diagnostics.sp_size;
      rep.sep = def.diagnostics.sep;
      rep.var = def.diagnostics.var;
      rep.backtracks = def.diagnostics.backtracks;
      rep.suspicious = def.sets.suspicious;
      if (!def.params.is_finite()) {
        if (opts.write_files) runner_detail::dump_halt(out_dir, t, updates, params, def.params);
        throw HaltError("non-finite parameters after defense step at round " + std::to_string(t));
      }
      params = std::move(def.params);
    }

    const bool eval_now = t % cfg.run.eval_every == 0 || t == cfg.run.rounds;
    if (eval_now) {
      rep.eval = evaluate(params, ex.dataset, cfg.run.ks, ex.targets, cfg.client.tcr_window);
    }
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (opts.write_files) {
      metrics << to_json(rep, ex.targets).dump() << '\n';
      metrics.flush();
      nlohmann::ordered_json tj;
      tj["round"] = t;
      tj["wall_seconds"] = rep.wall_seconds;
      timing << tj.dump() << '\n';
      timing.flush();
      if (eval_now) {
        Checkpoint c{hash, t, params, state, reference_norm};
        save_checkpoint(c, runner_detail::checkpoint_path(out_dir, t));
      }
    }
    if (opts.on_state) opts.on_state(t, params, state);
    if (opts.on_round) opts.on_round(rep);
    res.reports.push_back(std::move(rep));
  }
  res.params = std::move(params);
  res.state = std::move(state);
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  return run_experiment(prepare_experiment(cfg), opts);
}

}  // namespace fortress
