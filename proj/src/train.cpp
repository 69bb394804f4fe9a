#include "r2m/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "r2m/checkpoint.hpp"
#include "r2m/parallel.hpp"

namespace r2m {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Rng(seed, path).next_u64();
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void check_finite(const ParamSet& p, const char* which, long step) {
  for (const auto& e : p.entries()) {
    if (!e.value.all_finite()) {
      throw std::runtime_error("non-finite values in " + std::string(which) + " tensor " + e.name +
                               " at step " + std::to_string(step));
    }
  }
}

}  // namespace

json MetricsRecord::to_json() const {
  return {{"step", step},
          {"mode", mode},
          {"proxy_reward", proxy_reward},
          {"gold_reward", gold_reward},
          {"kl", kl},
          {"policy_loss", policy_loss},
          {"bt_loss", opt(bt_loss)},
          {"gre_loss", opt(gre_loss)},
          {"omega", opt(omega)},
          {"eps_normalized", opt(eps_normalized)},
          {"tv_shift", tv_shift},
          {"wall_clock_seconds", opt(wall_clock_seconds)}};
}

MetricsRecord MetricsRecord::from_json(const json& j) {
  MetricsRecord r;
  r.step = j.at("step").get<long>();
  r.mode = j.at("mode").get<std::string>();
  r.proxy_reward = j.at("proxy_reward").get<double>();
  r.gold_reward = j.at("gold_reward").get<double>();
  r.kl = j.at("kl").get<double>();
  r.policy_loss = j.at("policy_loss").get<double>();
  r.bt_loss = opt_from(j, "bt_loss");
  r.gre_loss = opt_from(j, "gre_loss");
  r.omega = opt_from(j, "omega");
  r.eps_normalized = opt_from(j, "eps_normalized");
  r.tv_shift = j.at("tv_shift").get<double>();
  r.wall_clock_seconds = opt_from(j, "wall_clock_seconds");
  return r;
}

Environment prepare_environment(const RunConfig& cfg) {
  cfg.validate();
  Environment env;
  const auto s = cfg.seed;
  env.prefs = gen_preference_dataset(cfg.task, cfg.data.pref_pairs, derive_seed(s, {streams::kPrefs}));
  const auto qseed = derive_seed(s, {streams::kQueries});
  for (int i = 0; i < cfg.data.query_pool; ++i) env.query_pool.push_back(gen_query(cfg.task, qseed, i));
  const auto pseed = derive_seed(s, {streams::kProbes});
  for (int i = 0; i < cfg.data.probe_queries; ++i) env.probes.push_back(gen_query(cfg.task, pseed, i));

  env.policy = init_policy(cfg.model, derive_seed(s, {streams::kPolicyInit}));
  env.rm = init_reward_model(cfg.model, derive_seed(s, {streams::kRmInit}));
  PretrainConfig pc = cfg.pretrain;
  pc.seed = derive_seed(s, {streams::kPretrain});
  env.pretrain = pretrain_vanilla_rm(env.rm, cfg.model, env.prefs, pc);

  if (cfg.mode == TrainMode::kPretrainedRm) {
    GoldTask clean = cfg.task;
    clean.bias = 0.0;
    const auto offline = gen_preference_dataset(clean, cfg.data.offline_pairs,
                                                derive_seed(s, {streams::kOffline}), env.query_pool);
    PretrainConfig oc = cfg.pretrain;
    oc.epochs = cfg.data.offline_epochs;
    oc.seed = derive_seed(s, {streams::kOffline, 1});
    env.offline = pretrain_vanilla_rm(env.rm, cfg.model, offline, oc);
  }
  return env;
}

std::vector<PrefExample> heldout_pairs(const RunConfig& cfg) {
  GoldTask clean = cfg.task;
  clean.bias = 0.0;
  return gen_preference_dataset(clean, cfg.data.heldout_pairs,
                                derive_seed(cfg.seed, {streams::kHeldout}));
}

Trainer::Trainer(const RunConfig& cfg) : Trainer(cfg, prepare_environment(cfg)) {}

Trainer::Trainer(const RunConfig& cfg, Environment env)
    : cfg_(cfg), env_(std::move(env)), policy_(env_.policy), rm_(env_.rm) {
  cfg_.validate();
}

MetricsRecord Trainer::run_step() {
  if (done()) throw std::logic_error("Trainer: all steps already run");
  const long t = step_;
  const auto& rl = cfg_.rl;
  const auto& mc = cfg_.model;
  const double w = omega(t, rl.total_steps, cfg_.omega_floor);
  const RewardMode amode = annotation_mode(cfg_.mode);

  // Sample with pi_old (the current parameters) and annotate.
  std::vector<Group> batch(rl.groups);
  std::vector<std::vector<double>> gold(rl.groups);
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& q = env_.query_pool[(t * rl.groups + i) % env_.query_pool.size()];
    Rng rng(cfg_.seed, {streams::kSample, static_cast<std::uint64_t>(t), i});
    Group g = sample_group(policy_, mc, q, rl.group_size, rl.temperature, rl.max_new, rng);
    attach_ref_logprobs(g, env_.policy, mc);
    for (std::size_t j = 0; j < g.size(); ++j) {
      g.rte.push_back(rm_backbone_rte(rm_, mc, g.responses[j]));
      Rng noise(cfg_.seed, {streams::kNoise, static_cast<std::uint64_t>(t), i, j});
      g.rewards.push_back(r2m_reward(rm_, amode, g.rte[j], &g.hidden[j], w, &noise));
      gold[i].push_back(gold_reward(cfg_.task, g.responses[j]));
    }
    compute_advantages(g, rl.estimator, rl.grpo_eps);
    batch[i] = std::move(g);
  });

  MetricsRecord rec;
  rec.step = t;
  rec.mode = to_string(cfg_.mode);
  std::vector<double> rewards, golds;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    rewards.insert(rewards.end(), batch[i].rewards.begin(), batch[i].rewards.end());
    golds.insert(golds.end(), gold[i].begin(), gold[i].end());
  }
  rec.proxy_reward = mean(rewards);
  rec.gold_reward = mean(golds);
  rec.eps_normalized = misalignment_from_scores(rewards, golds).normalized;
  if (fuses_feedback(cfg_.mode)) rec.omega = w;
  last_rewards_ = std::move(rewards);

  const auto pstats = optimize_policy(batch, policy_, mc, rl);
  rec.policy_loss = pstats.loss;
  rec.kl = pstats.kl;
  check_finite(policy_, "policy", t);

  const auto rstats = update_rm(batch, rm_, mc, cfg_.effective_rm(), w, update_mode(cfg_.mode),
                                derive_seed(cfg_.seed, {streams::kNoiseUpdate, static_cast<std::uint64_t>(t)}));
  if (rstats.updated) {
    rec.bt_loss = rstats.bt;
    rec.gre_loss = rstats.gre;
  }
  check_finite(rm_, "reward model", t);

  Rng probe_rng(cfg_.seed, {streams::kProbeSample, static_cast<std::uint64_t>(t)});
  rec.tv_shift = tv_shift(policy_, env_.policy, mc, env_.probes, rl.temperature, rl.max_new, probe_rng);
  ++step_;
  return rec;
}

fs::path policy_ckpt_path(const fs::path& run, long step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "policy_step_%04ld.json", step);
  return run / "ckpt" / buf;
}

fs::path rm_ckpt_path(const fs::path& run, long step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "rm_step_%04ld.json", step);
  return run / "ckpt" / buf;
}

TrainResult run_train(const RunConfig& cfg, const std::optional<fs::path>& out_dir,
                      const Environment* shared_env) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  Trainer trainer = shared_env ? Trainer(cfg, *shared_env) : Trainer(cfg);
  const double setup_seconds = std::chrono::duration<double>(clock::now() - t0).count();

  std::ofstream metrics, timing;
  const std::string mode = to_string(cfg.mode);
  auto snapshot = [&](long step) {
    if (!out_dir) return;
    save_checkpoint(trainer.policy(), policy_ckpt_path(*out_dir, step), step, mode);
    save_checkpoint(trainer.rm(), rm_ckpt_path(*out_dir, step), step, mode);
  };
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "config.json") << config_to_json(cfg).dump(2) << '\n';
    std::ofstream prefs(*out_dir / "prefs.jsonl");
    write_pref_jsonl(prefs, trainer.environment().prefs);
    metrics.open(*out_dir / "metrics.jsonl");
    timing.open(*out_dir / "timing.jsonl");
    timing << json{{"phase", "setup"}, {"seconds", setup_seconds}}.dump() << '\n';
    snapshot(0);
  }

  TrainResult result;
  while (!trainer.done()) {
    const long step = trainer.step();
    const auto ts = clock::now();
    MetricsRecord rec;
    try {
      rec = trainer.run_step();
    } catch (const std::exception& e) {
      if (out_dir) {
        metrics << json{{"step", step}, {"mode", mode}, {"error", e.what()}}.dump() << '\n';
        metrics.flush();
      }
      throw;
    }
    const double secs = std::chrono::duration<double>(clock::now() - ts).count();
    if (cfg.log_wall_clock) rec.wall_clock_seconds = secs;
    if (step == 0) result.first_step_rewards = trainer.last_rewards();
    if (out_dir) {
      metrics << rec.to_json().dump() << '\n';
      metrics.flush();
      timing << json{{"phase", "step"}, {"step", step}, {"seconds", secs}}.dump() << '\n';
      if ((step + 1) % cfg.snapshot_interval == 0 || trainer.done()) snapshot(step + 1);
    }
    result.metrics.push_back(std::move(rec));
  }

  result.policy = trainer.policy();
  result.rm = trainer.rm();
  if (out_dir) {
    const auto& env = trainer.environment();
    json summary{{"steps", cfg.rl.total_steps},
                 {"mode", mode},
                 {"pretrain_accuracy", env.pretrain.train_accuracy},
                 {"pretrain_loss", env.pretrain.final_loss},
                 {"final_gold_reward", result.metrics.back().gold_reward},
                 {"final_proxy_reward", result.metrics.back().proxy_reward}};
    if (env.offline) summary["offline_accuracy"] = env.offline->train_accuracy;
    std::ofstream(*out_dir / "summary.json") << summary.dump(2) << '\n';
  }
  return result;
}

}  // namespace r2m
