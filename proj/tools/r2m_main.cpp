// r2m: train runs, analyze them, inspect checkpoints.
#include <cmath>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "r2m/checkpoint.hpp"
#include "r2m/studies.hpp"
#include "r2m/train.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed,
              const std::optional<std::string>& out) {
  r2m::RunConfig cfg = r2m::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (out) cfg.out_dir = *out;
  const fs::path dir = cfg.out_dir;
  const auto res = r2m::run_train(cfg, dir);
  const auto& last = res.metrics.back();
  std::printf("%s: %ld steps, final proxy %.4f gold %.4f kl %.4f -> %s\n",
              r2m::to_string(cfg.mode).c_str(), static_cast<long>(res.metrics.size()),
              last.proxy_reward, last.gold_reward, last.kl, dir.string().c_str());
  return 0;
}

int cmd_analyze(const std::string& study, const std::vector<std::string>& runs,
                const std::string& out, const r2m::StudyParams& params) {
  std::vector<fs::path> paths(runs.begin(), runs.end());
  const auto side = r2m::run_study(study, paths, out, params);
  std::cout << side.dump(2) << '\n';
  return 0;
}

int cmd_ckpt_dump(const std::string& path) {
  const auto ck = r2m::load_checkpoint(path);
  std::printf("step %ld mode %s tensors %zu\n", ck.step, ck.mode.c_str(), ck.params.size());
  for (const auto& e : ck.params.entries()) {
    double sq = 0.0;
    for (double v : e.value.data) sq += v * v;
    std::printf("  %-28s %-10s %s rms %.6g\n", e.name.c_str(),
                r2m::shape_string(e.value.shape).c_str(), e.trainable ? "train " : "frozen",
                e.value.size() ? std::sqrt(sq / static_cast<double>(e.value.size())) : 0.0);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"R2M desk-scale RLHF lab"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Run one training job");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  train->add_option("--config", config_path, "JSON run config")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out, "Override the output directory");

  auto* analyze = app.add_subcommand("analyze", "Run a study over finished runs");
  std::string study, analyze_out;
  std::vector<std::string> runs;
  r2m::StudyParams params;
  long policy_step = -1;
  analyze->add_option("--study", study, "Study name")
      ->required()
      ->check(CLI::IsMember(r2m::study_names()));
  analyze->add_option("--runs", runs, "Run directories")->required()->expected(1, -1);
  analyze->add_option("--out", analyze_out, "Report directory")->required();
  analyze->add_option("--grid", params.sweep.grid, "alpha-sweep: alpha grid");
  analyze->add_option("--seeds", params.sweep.seeds, "alpha-sweep: head seeds");
  analyze->add_option("--steps", params.sweep.steps, "alpha-sweep: head updates per cell");
  analyze->add_option("--lr", params.sweep.lr, "alpha-sweep: head learning rate");
  analyze->add_option("--groups", params.sweep_groups, "alpha-sweep: frozen batch groups");
  analyze->add_option("--probes", params.probes, "reward-consistency: probe queries");
  analyze->add_option("--policy-step", policy_step, "similarity: policy snapshot step");

  auto* dump = app.add_subcommand("ckpt-dump", "Print a checkpoint manifest summary");
  std::string ckpt_path;
  dump->add_option("--path", ckpt_path, "Checkpoint manifest (.json)")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config_path, seed, out);
    if (*analyze) {
      if (policy_step >= 0) params.step = policy_step;
      return cmd_analyze(study, runs, analyze_out, params);
    }
    if (*dump) return cmd_ckpt_dump(ckpt_path);
  } catch (const r2m::StudyError& e) {
    std::fprintf(stderr, "analyze %s: %s\n", study.c_str(), e.what());
    return 3;
  } catch (const r2m::CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
