// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fortress/fortress.hpp"

#ifndef FORTRESS_CONFIG_DIR
#error "FORTRESS_CONFIG_DIR must point at the configs/ directory"
#endif

using namespace fortress;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds. Changing any of these changes what is accepted.
constexpr double kGradRelErr = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr double kAggregateTol = 1e-12;
constexpr double kLog2Tol = 1e-12;
constexpr double kSepTol = 1e-9;
constexpr double kLearnMargin = 0.10;
constexpr double kLearnSeconds = 600.0;
constexpr double kAttackFactor = 5.0;
// Regression floor on the post-attack ER@10 gain, frozen from the reference
// run (mean gain 0.54 over seeds 1-3) at roughly half its value.
constexpr double kAttackMinGain = 0.25;
constexpr double kMaxHrLoss = 0.10;  // relative
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ExperimentConfig load(const std::string& name) {
  return parse_config(std::string(FORTRESS_CONFIG_DIR) + "/" + name + ".ini");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs in memory and checks that every logged loss is finite.
struct Run {
  std::vector<RoundReport> reports;
  bool finite = true;

  const EvalSummary& eval_at(std::size_t round) const {
    for (const auto& r : reports) {
      if (r.round == round && r.eval) return *r.eval;
    }
    throw std::runtime_error("no evaluation at round " + std::to_string(round));
  }
  const EvalSummary& final_eval() const { return *reports.back().eval; }
};

Run run_in_memory(const ExperimentConfig& cfg) {
  RunOptions opts;
  opts.write_files = false;
  Run out;
  out.reports = run_experiment(cfg, opts).reports;
  for (const auto& r : out.reports) {
    for (double v : {r.rec, r.cl, r.tcr, r.sep, r.var}) out.finite = out.finite && std::isfinite(v);
  }
  return out;
}

std::size_t k_index(const EvalSummary& e, std::size_t k) {
  const auto it = std::find(e.ks.begin(), e.ks.end(), k);
  if (it == e.ks.end()) throw std::runtime_error("K not evaluated");
  return static_cast<std::size_t>(it - e.ks.begin());
}
double hr10(const EvalSummary& e) { return e.hr[k_index(e, 10)]; }
double er10(const EvalSummary& e) { return e.er_mean[k_index(e, 10)]; }

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

std::string join(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "/" : "") + fmt("%.3f", xs[i]);
  return s;
}

// ---------------------------------------------------------------------------

Outcome ac1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  auto track = [&](double e) { worst = std::max(worst, e); };
  const ModelParams p = init_params({10, 8}, 21);
  const ItemSeq seq{0, 7, 3, 9, 2, 5};
  const double eps = 1e-6;
  auto sink_loss = [](auto fn) {
    return [fn](const ModelParams& q) {
      ModelParams sink(q.shape());
      return fn(q, sink);
    };
  };

  {
    const auto r = rec_loss(p, seq);
    track(finite_diff_check([&](const ModelParams& q) { return rec_loss(q, seq).loss; }, p,
                            r.grad, eps));
  }
  {
    Rng rng(1);
    const auto views = draw_sequence_views(seq, AugmentationPolicy{}, 4, 10, rng);
    ModelParams g(p.shape());
    sequence_view_loss_into(p, views, 0.5, g, 1.0);
    track(finite_diff_check(sink_loss([&](const ModelParams& q, ModelParams& s) {
                              return sequence_view_loss_into(q, views, 0.5, s, 1.0);
                            }),
                            p, g, eps));
  }
  {
    Rng rng(2);
    const auto noise = draw_user_noise(8, 0.1, 4, rng);
    ModelParams g(p.shape());
    user_view_loss_into(p, seq, noise, 0.5, g, 1.0);
    track(finite_diff_check(sink_loss([&](const ModelParams& q, ModelParams& s) {
                              return user_view_loss_into(q, seq, noise, 0.5, s, 1.0);
                            }),
                            p, g, eps));
  }
  {
    Rng rng(3);
    const auto pert = make_item_view_perturbation(seq, rec_loss(p, seq).grad, 0.1, rng);
    ModelParams g(p.shape());
    item_view_loss_into(p, pert, 0.5, g, 1.0);
    track(finite_diff_check(sink_loss([&](const ModelParams& q, ModelParams& s) {
                              return item_view_loss_into(q, pert, 0.5, s, 1.0);
                            }),
                            p, g, eps));
  }
  {
    const auto r = tcr_loss(p, seq, 3);
    track(finite_diff_check([&](const ModelParams& q) { return tcr_loss(q, seq, 3).loss; }, p,
                            r.grad, eps));
  }
  const ItemSeq hot{0, 1}, sp{6, 8};
  {
    const auto r = sep_loss(p, hot, sp, 0.5);
    track(finite_diff_check([&](const ModelParams& q) { return sep_loss(q, hot, sp, 0.5).loss; },
                            p, r.grad, eps));
  }
  {
    const auto nbs = hot_neighborhoods(p, hot, 4);
    const auto r = var_loss_fixed(p, nbs);
    track(finite_diff_check([&](const ModelParams& q) { return var_loss_fixed(q, nbs).loss; }, p,
                            r.grad, eps));
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelErr && secs < kGradSeconds,
          fmt("7 losses, max rel err %.2e (< %.0e), %.2f s (< %.0f s)", worst, kGradRelErr, secs,
              kGradSeconds)};
}

Outcome ac2_aggregation() {
  const ModelShape s{4, 2};
  Rng rng(2024);
  double worst = 0.0;
  bool permutation_exact = true;
  for (int c = 0; c < 100; ++c) {
    std::vector<ServerUpdate> ups;
    for (ClientId id = 0; id < 3; ++id) {
      ServerUpdate u{static_cast<ClientId>(rng.uniform_index(1000)), 1 + rng.uniform_index(50),
                     ModelParams(s)};
      for (double& x : u.params.values()) x = rng.normal(0.0, 10.0);
      ups.push_back(std::move(u));
    }
    const ModelParams got = aggregate(ups);
    double total = 0.0;
    for (const auto& u : ups) total += static_cast<double>(u.weight);
    for (std::size_t i = 0; i < got.size(); ++i) {
      long double want = 0.0L;
      for (const auto& u : ups) {
        want += static_cast<long double>(u.weight) * u.params.values()[i];
      }
      worst = std::max(worst, std::abs(got.values()[i] - static_cast<double>(want / total)));
    }
    std::vector<std::size_t> order{0, 1, 2};
    while (std::next_permutation(order.begin(), order.end())) {
      std::vector<ServerUpdate> perm;
      for (std::size_t i : order) perm.push_back(ups[i]);
      permutation_exact = permutation_exact && aggregate(perm) == got;
    }
  }
  return {worst <= kAggregateTol && permutation_exact,
          fmt("100 cases, max abs err %.2e (<= %.0e), permutations bit-exact: %s", worst,
              kAggregateTol, permutation_exact ? "yes" : "no")};
}

Outcome ac3_closed_forms() {
  std::vector<std::string> failures;
  const std::vector<Vec64> one{Vec64{1, 0}};
  const double nce = info_nce(Vec64{1, 0}, Vec64{1, 0}, one, 1.0).loss;
  if (std::abs(nce - std::log(2.0)) > kLog2Tol) failures.push_back("infonce");

  ModelParams p(ModelShape{7, 3});
  for (std::size_t k = 0; k < 7; ++k) p.embedding(k)[2] = 0.7;
  const ItemSeq hot{0, 1, 2}, sp{4, 5, 6, 3};
  const double sep = sep_loss(p, hot, sp, 0.3).loss;
  if (std::abs(sep - 3.0 * std::log(4.0)) > kSepTol) failures.push_back("sep");

  const ModelParams q = init_params({7, 4}, 5);
  if (tcr_loss(q, ItemSeq{2, 2, 2, 2, 2, 2}, 3).loss != 0.0) failures.push_back("tcr");

  // Two users over items 0..5, target item 4.
  //   user A: ranked 4,1,3 | test rank 2 | consumed {0}
  //   user B: ranked 2,5,1 | test rank 4 | consumed {3,4}
  std::vector<RankingResult> rs(2);
  rs[0].ranked = {4, 1, 3};
  rs[0].target_rank = 2;
  rs[0].excluded = {0};
  rs[1].ranked = {2, 5, 1};
  rs[1].target_rank = 4;
  rs[1].excluded = {3, 4};
  const ItemSeq targets{4};
  const bool metrics_ok = hr_at_k(rs, 1) == 0.0 && hr_at_k(rs, 3) == 0.5 &&
                          ndcg_at_k(rs, 3) == 0.5 / std::log2(3.0) &&
                          er_at_k(rs, targets, 1) == 1.0 && er_at_k(rs, targets, 3) == 1.0;
  if (!metrics_ok) failures.push_back("metrics");

  std::string detail = fmt("infonce-log2 err %.1e, sep err %.1e, tcr-const exact, metric fixtures",
                           std::abs(nce - std::log(2.0)), std::abs(sep - 3.0 * std::log(4.0)));
  for (const auto& f : failures) detail += " [" + f + " failed]";
  return {failures.empty(), detail};
}

Outcome ac4_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load("baseline");
  const Experiment ex = prepare_experiment(cfg);
  RunOptions opts;
  opts.write_files = false;
  const auto res = run_experiment(ex, opts);
  const double model = hr10(*res.reports.back().eval);
  const double pop = hr10(summarize(rank_users_by_popularity(ex.dataset, 10),
                                    std::vector<std::size_t>{10}, {}));
  const double secs = seconds_since(t0);
  return {model - pop >= kLearnMargin && secs < kLearnSeconds && res.reports.size() <= 100,
          fmt("HR@10 model %.3f vs popularity %.3f after %zu rounds, margin %.3f (>= %.2f), "
              "%.1f s",
              model, pop, res.reports.size(), model - pop, kLearnMargin, secs)};
}

struct AttackRuns {
  std::vector<Run> nodef, def;
};

AttackRuns attack_runs(const std::string& kind) {
  AttackRuns out;
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig a = load(kind), b = load(kind + "_defended");
    a.run.seed = b.run.seed = seed;
    out.nodef.push_back(run_in_memory(a));
    out.def.push_back(run_in_memory(b));
  }
  return out;
}

Outcome ac5_attack(const AttackRuns& promo) {
  const std::size_t start = load("promotion").attack.start_round;
  std::vector<double> pre, post;
  for (const auto& r : promo.nodef) {
    pre.push_back(er10(r.eval_at(start - 1)));
    post.push_back(er10(r.eval_at(start + 29)));
  }
  const double a = mean(pre), b = mean(post);
  return {b >= kAttackFactor * a && b - a >= kAttackMinGain,
          fmt("mean ER@10 round %zu %.4f -> round %zu %.4f (seeds %s); need >= %.0fx and gain "
              ">= %.2f",
              start - 1, a, start + 29, b, join(post).c_str(), kAttackFactor, kAttackMinGain)};
}

Outcome ac6_defense(const AttackRuns& promo, const AttackRuns& camo) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, runs] : {std::pair{"promotion", &promo}, std::pair{"camouflage", &camo}}) {
    std::vector<double> er_n, er_d, hr_n, hr_d;
    for (std::size_t s = 0; s < kSeeds.size(); ++s) {
      er_n.push_back(er10(runs->nodef[s].final_eval()));
      er_d.push_back(er10(runs->def[s].final_eval()));
      hr_n.push_back(hr10(runs->nodef[s].final_eval()));
      hr_d.push_back(hr10(runs->def[s].final_eval()));
    }
    bool per_seed = true;
    for (std::size_t s = 0; s < kSeeds.size(); ++s) per_seed = per_seed && er_d[s] < er_n[s];
    const bool er_ok = per_seed && mean(er_d) < mean(er_n);
    const bool hr_ok = mean(hr_d) >= (1.0 - kMaxHrLoss) * mean(hr_n);
    ok = ok && er_ok && hr_ok;
    detail += fmt("%s%s: ER@10 %s -> %s (mean %.3f -> %.3f), HR@10 mean %.3f -> %.3f",
                  detail.empty() ? "" : "; ", name, join(er_n).c_str(), join(er_d).c_str(),
                  mean(er_n), mean(er_d), mean(hr_n), mean(hr_d));
  }
  return {ok, detail};
}

Outcome ac7_temporal() {
  std::vector<double> with, without;
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig on = load("temporal");
    on.run.seed = seed;
    ExperimentConfig off = on;
    off.client.lambda_tcr = 0.0;
    with.push_back(run_in_memory(on).final_eval().tcr_drift);
    without.push_back(run_in_memory(off).final_eval().tcr_drift);
  }
  bool ok = true;
  for (std::size_t s = 0; s < with.size(); ++s) ok = ok && with[s] < without[s];
  return {ok, fmt("drift after 20 rounds, tcr=0 %s vs tcr>0 %s (seeds 1/2/3)",
                  join(without).c_str(), join(with).c_str())};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome ac8_determinism() {
  const fs::path root = fs::temp_directory_path() / "fortress_acceptance";
  fs::remove_all(root);
  ExperimentConfig cfg = load("promotion");
  cfg.run.rounds = 20;
  cfg.attack.start_round = 6;
  cfg.run.eval_every = 5;
  auto in = [&](const std::string& d) {
    ExperimentConfig c = cfg;
    c.run.out_dir = (root / d).string();
    return c;
  };
  const RunResult a = run_experiment(in("a"));
  run_experiment(in("b"));
  const std::string ma = slurp(root / "a" / "metrics.jsonl");
  const bool identical = !ma.empty() && ma == slurp(root / "b" / "metrics.jsonl");

  const ExperimentConfig cr = in("r");
  RunOptions stop;
  stop.stop_after = 13;
  run_experiment(cr, stop);
  RunOptions resume;
  resume.resume_from = (root / "r" / "checkpoints" / "round_00010.ckpt").string();
  const RunResult r = run_experiment(cr, resume);
  const bool resumed = ma == slurp(root / "r" / "metrics.jsonl") && r.params == a.params &&
                       r.state == a.state;
  fs::remove_all(root);
  return {identical && resumed,
          fmt("metrics.jsonl byte-identical across runs: %s; resume from round 10 after stop at "
              "13 matches trace and final state: %s",
              identical ? "yes" : "no", resumed ? "yes" : "no")};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](const char* id, const char* what, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s %s: %s\n", id, o.pass ? "PASS" : "FAIL", what, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  };

  report("AC1", "gradient suite", ac1_gradients);
  report("AC2", "aggregation exactness", ac2_aggregation);
  report("AC3", "closed-form oracles", ac3_closed_forms);
  report("AC4", "learning sanity", ac4_learning);

  AttackRuns promo, camo;
  bool all_finite = true;
  try {
    promo = attack_runs("promotion");
    camo = attack_runs("camouflage");
    for (const auto* runs : {&promo, &camo}) {
      for (const auto* set : {&runs->nodef, &runs->def}) {
        for (const auto& r : *set) all_finite = all_finite && r.finite;
      }
    }
  } catch (const std::exception& e) {
    std::printf("attack benchmark aborted: %s\n", e.what());
  }
  auto with_finite = [&](Outcome o) {
    if (!all_finite) {
      o.pass = false;
      o.detail += " [non-finite loss logged]";
    }
    return o;
  };
  report("AC5", "attack efficacy", [&] { return with_finite(ac5_attack(promo)); });
  report("AC6", "defense efficacy", [&] { return with_finite(ac6_defense(promo, camo)); });
  report("AC7", "temporal drift", ac7_temporal);
  report("AC8", "determinism and resume", ac8_determinism);

  std::printf("%d of 8 criteria failed\n", failed);
  return failed;
}
