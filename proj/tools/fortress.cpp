// Command-line driver: run an experiment, evaluate a checkpoint, or dump the
// synthetic dataset a config describes.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fortress/fortress.hpp"

namespace {

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            std::optional<std::string> out, std::optional<std::string> resume, bool quiet) {
  fortress::ExperimentConfig cfg = fortress::parse_config(config_path);
  if (seed) cfg.run.seed = *seed;
  if (out) cfg.run.out_dir = *out;
  fortress::RunOptions opts;
  opts.resume_from = resume;
  if (!quiet) {
    opts.on_round = [](const fortress::RoundReport& r) {
      if (!r.eval) return;
      std::fprintf(stderr, "round %zu  rec %.4f", r.round, r.rec);
      for (std::size_t i = 0; i < r.eval->ks.size(); ++i) {
        std::fprintf(stderr, "  HR@%zu %.4f", r.eval->ks[i], r.eval->hr[i]);
      }
      if (!r.eval->er_mean.empty()) {
        std::fprintf(stderr, "  ER@%zu %.4f", r.eval->ks.back(), r.eval->er_mean.back());
      }
      std::fprintf(stderr, "  |hot| %zu |sp| %zu\n", r.hot_size, r.sp_size);
    };
  }
  fortress::run_experiment(cfg, opts);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::vector<std::size_t>& ks, const std::vector<fortress::ItemId>& targets,
             std::size_t window, std::size_t max_seq_len) {
  const fortress::Checkpoint c = fortress::load_checkpoint(ckpt_path);
  fortress::LoadOptions lo;
  lo.max_seq_len = max_seq_len;
  auto split = fortress::leave_one_out_split(fortress::load_interactions(data_path, lo));
  if (split.dataset.num_items != c.params.num_items()) {
    throw fortress::CheckpointError(
        "checkpoint has " + std::to_string(c.params.num_items()) + " items but the data has " +
        std::to_string(split.dataset.num_items));
  }
  const auto s = fortress::evaluate(c.params, split.dataset, ks, targets, window);
  fortress::RoundReport r;
  r.round = c.round;
  r.eval = s;
  nlohmann::ordered_json j = fortress::to_json(r, targets)["eval"];
  j["round"] = c.round;
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_gen_data(const std::string& config_path, std::optional<std::string> out) {
  const fortress::ExperimentConfig cfg = fortress::parse_config(config_path);
  const fortress::Dataset ds = fortress::load_dataset(cfg);
  const std::string path =
      out ? *out : (std::filesystem::path(cfg.run.out_dir) / "interactions.csv").string();
  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
    std::filesystem::create_directories(parent);
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  fortress::write_interactions(f, ds);
  std::fprintf(stderr, "wrote %zu users, %zu items to %s\n", ds.num_users, ds.num_items,
               path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated sequential recommendation simulator"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, data_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, resume;
  bool quiet = false;
  std::vector<std::size_t> ks{5, 10, 20};
  std::vector<fortress::ItemId> targets;
  std::size_t window = 5, max_seq_len = 50;

  auto* run = app.add_subcommand("run", "Run a federated experiment");
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--seed", seed, "Override run.seed");
  run->add_option("--out", out, "Override run.out_dir");
  run->add_option("--resume", resume, "Continue from a checkpoint");
  run->add_flag("--quiet", quiet, "No per-eval progress on stderr");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--data", data_path, "Interaction CSV")->required();
  ev->add_option("--k", ks, "Cutoffs")->delimiter(',');
  ev->add_option("--targets", targets, "Items to report exposure for")->delimiter(',');
  ev->add_option("--tcr-window", window, "Window for the drift metric");
  ev->add_option("--max-seq-len", max_seq_len, "Per-user truncation length");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as CSV");
  gen->add_option("--config", config_path, "Config file")->required();
  gen->add_option("--out", out, "Output CSV path");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, seed, out, resume, quiet);
    if (*ev) return cmd_eval(ckpt_path, data_path, ks, targets, window, max_seq_len);
    if (*gen) return cmd_gen_data(config_path, out);
  } catch (const fortress::HaltError& e) {
    std::fprintf(stderr, "halted: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
