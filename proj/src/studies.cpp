#include "r2m/studies.hpp"

#include <fstream>
#include <map>

#include "r2m/checkpoint.hpp"
#include "r2m/report.hpp"
#include "r2m/train.hpp"

namespace r2m {

namespace fs = std::filesystem;
using nlohmann::json;

RunDir RunDir::open(const fs::path& path) {
  const auto cfg = path / "config.json";
  if (!fs::exists(cfg)) throw StudyError("run " + path.string() + " has no config.json");
  try {
    return RunDir{path, load_config(cfg)};
  } catch (const std::invalid_argument& e) {
    throw StudyError("run " + path.string() + ": " + e.what());
  }
}

bool RunDir::has_snapshot(long step) const {
  return fs::exists(policy_ckpt_path(path, step)) && fs::exists(rm_ckpt_path(path, step));
}

ParamSet RunDir::policy(long step) const {
  const auto p = policy_ckpt_path(path, step);
  if (!fs::exists(p)) throw StudyError("missing policy snapshot " + p.string());
  return load_checkpoint(p).params;
}

ParamSet RunDir::rm(long step) const {
  const auto p = rm_ckpt_path(path, step);
  if (!fs::exists(p)) throw StudyError("missing reward-model snapshot " + p.string());
  return load_checkpoint(p).params;
}

std::vector<long> RunDir::snapshot_steps() const {
  std::vector<long> out{0};
  const long total = config.rl.total_steps;
  for (long s = config.snapshot_interval; s < total; s += config.snapshot_interval) out.push_back(s);
  out.push_back(total);
  return out;
}

std::string RunDir::label() const {
  const auto name = path.filename().empty() ? path.parent_path().filename() : path.filename();
  return name.string() + " (" + to_string(config.mode) + ")";
}

namespace {

std::vector<RunDir> open_runs(const std::vector<fs::path>& runs, std::size_t min_runs) {
  if (runs.size() < min_runs) {
    throw StudyError("study needs at least " + std::to_string(min_runs) + " run directory");
  }
  std::vector<RunDir> out;
  for (const auto& r : runs) out.push_back(RunDir::open(r));
  return out;
}

std::vector<TokenSeq> study_queries(const RunConfig& cfg, std::uint64_t tag, std::size_t n) {
  std::vector<TokenSeq> q;
  const auto seed = derive_seed(cfg.seed, {streams::kAnalysis, tag});
  for (std::size_t i = 0; i < n; ++i) q.push_back(gen_query(cfg.task, seed, i));
  return q;
}

json alpha_sweep_study(const std::vector<RunDir>& runs, const fs::path& out, const StudyParams& p) {
  const auto& run = runs.front();
  const auto& cfg = run.config;
  const ParamSet policy = run.policy(0);
  const ParamSet rm = run.rm(0);
  const auto queries = study_queries(cfg, 1, p.sweep_groups);
  const auto batch = frozen_batch(policy, rm, cfg.model, queries, p.sweep_groups,
                                  cfg.rl.group_size, cfg.rl.temperature, cfg.rl.max_new,
                                  derive_seed(cfg.seed, {streams::kAnalysis, 2}));
  const auto res = alpha_sweep(batch, rm, cfg.model, p.sweep);

  std::vector<std::vector<CsvCell>> rows;
  for (const auto& c : res.cells) {
    rows.push_back({c.alpha, static_cast<long>(c.seed), c.mean_degeneration, c.final_loss});
  }
  write_csv(out / "alpha_sweep.csv", {"alpha", "seed", "mean_degeneration", "final_loss"}, rows);
  json side{{"study", "alpha-sweep"},
            {"run", run.path.string()},
            {"grid", res.grid},
            {"seeds", res.seeds},
            {"steps", p.sweep.steps},
            {"lr", p.sweep.lr},
            {"w", p.sweep.w},
            {"groups", p.sweep_groups},
            {"strictly_decreasing", res.strictly_decreasing},
            {"verdict", res.verdict}};
  std::vector<LineSeries> series;
  for (std::size_t s = 0; s < res.seeds.size(); ++s) {
    LineSeries ls{"seed " + std::to_string(res.seeds[s]), {}, {}};
    for (std::size_t a = 0; a < res.grid.size(); ++a) {
      ls.x.push_back(res.grid[a]);
      ls.y.push_back(res.cell(s, a).mean_degeneration);
    }
    series.push_back(std::move(ls));
  }
  write_svg(out / "alpha_sweep.svg",
            svg_line_chart("Degeneration after head training", "alpha", "mean GRE (nats)", series));
  return side;
}

json reward_consistency_study(const std::vector<RunDir>& runs, const fs::path& out,
                              const StudyParams& p) {
  const auto& first = runs.front().config;
  const auto probes = study_queries(first, 3, p.probes);
  std::vector<std::vector<CsvCell>> rows;
  std::vector<LineSeries> series;
  json side{{"study", "reward-consistency"}, {"probes", p.probes}, {"runs", json::array()}};
  for (const auto& run : runs) {
    const auto& cfg = run.config;
    if (cfg.model.policy_dim != first.model.policy_dim || cfg.task.max_targets != first.task.max_targets) {
      throw StudyError("reward-consistency: runs use incompatible model or task settings");
    }
    std::vector<ProbeSnapshot> snaps;
    std::map<long, ParamSet> rms;
    std::vector<long> gaps;
    for (long s : run.snapshot_steps()) {
      ProbeSnapshot ps{s, std::nullopt};
      if (run.has_snapshot(s)) {
        ps.policy = run.policy(s);
        rms.emplace(s, run.rm(s));
      } else {
        gaps.push_back(s);
      }
      snaps.push_back(std::move(ps));
    }
    const RewardMode mode = annotation_mode(cfg.mode);
    SnapshotScorer scorer = [&](long step, const TokenSeq& pair, const Tensor& h) {
      const ParamSet& rm = rms.at(step);
      const Tensor rte = rm_backbone_rte(rm, cfg.model, pair);
      const double w = omega(step, cfg.rl.total_steps, cfg.omega_floor);
      std::uint64_t key = 1469598103934665603ULL;
      for (int t : pair.ids) key = (key ^ static_cast<std::uint64_t>(t)) * 1099511628211ULL;
      Rng noise(cfg.seed, {streams::kAnalysis, 4, static_cast<std::uint64_t>(step), key});
      return r2m_reward(rm, mode, rte, &h, w, &noise);
    };
    const auto res = reward_consistency_probe(probes, snaps, {{run.label(), scorer}}, cfg.model,
                                              cfg.rl.temperature, cfg.rl.max_new,
                                              derive_seed(first.seed, {streams::kAnalysis, 5}));
    const auto& s = res.front();
    LineSeries ls{s.name, {}, s.mean_reward};
    for (std::size_t i = 0; i < s.steps.size(); ++i) {
      ls.x.push_back(static_cast<double>(s.steps[i]));
      rows.push_back({run.path.string(), to_string(cfg.mode), s.steps[i],
                      s.mean_reward[i] ? CsvCell(*s.mean_reward[i]) : CsvCell(std::nullopt)});
    }
    series.push_back(std::move(ls));
    side["runs"].push_back({{"path", run.path.string()}, {"mode", to_string(cfg.mode)}, {"gaps", gaps}});
  }
  write_csv(out / "reward_consistency.csv", {"run", "mode", "step", "mean_reward"}, rows);
  write_svg(out / "reward_consistency.svg",
            svg_line_chart("Reward on probe queries", "step", "mean RM reward", series));
  return side;
}

json similarity_study_files(const std::vector<RunDir>& runs, const fs::path& out,
                            const StudyParams& p) {
  const auto& run = runs.front();
  const auto& cfg = run.config;
  const long step = p.step.value_or(cfg.rl.total_steps);
  const auto rep = similarity_study(run.policy(step), run.rm(0), cfg.model, cfg.task, p.per_label,
                                    p.corr_pairs, derive_seed(cfg.seed, {streams::kAnalysis, 6}));
  std::vector<std::vector<CsvCell>> rows;
  for (const auto& l : rep.layers) {
    rows.push_back({static_cast<long>(l.layer), l.mu_intra, l.mu_cross,
                    static_cast<long>(l.intra_pairs), static_cast<long>(l.cross_pairs)});
  }
  write_csv(out / "similarity_layers.csv",
            {"layer", "mu_intra", "mu_cross", "intra_pairs", "cross_pairs"}, rows);
  rows.clear();
  for (std::size_t i = 0; i < rep.pair_similarity.size(); ++i) {
    rows.push_back({rep.pair_similarity[i], rep.pair_reward_gap[i]});
  }
  write_csv(out / "similarity_pairs.csv", {"similarity", "abs_reward_gap"}, rows);
  return {{"study", "similarity"},
          {"run", run.path.string()},
          {"policy_step", step},
          {"per_label", p.per_label},
          {"corr_pairs", p.corr_pairs},
          {"deepest_gap", rep.layers.back().mu_intra - rep.layers.back().mu_cross},
          {"correlation", rep.correlation}};
}

json rm_accuracy_study(const std::vector<RunDir>& runs, const fs::path& out) {
  std::vector<std::vector<CsvCell>> rows;
  json side{{"study", "rm-accuracy"}, {"runs", json::array()}};
  for (const auto& run : runs) {
    const auto& cfg = run.config;
    const long T = cfg.rl.total_steps;
    const auto held = heldout_pairs(cfg);
    const double w = omega(T, T, cfg.omega_floor);
    const ParamSet rm0 = run.rm(0), rmT = run.rm(T), pol0 = run.policy(0), polT = run.policy(T);
    const double vanilla = rm_accuracy(vanilla_scorer(rm0, cfg.model), held);
    const double before = rm_accuracy(r2m_scorer(rm0, cfg.model, pol0, w), held);
    const double after = rm_accuracy(r2m_scorer(rmT, cfg.model, polT, w), held);
    rows.push_back({run.path.string(), to_string(cfg.mode), static_cast<long>(held.size()), vanilla,
                    before, after});
    side["runs"].push_back({{"path", run.path.string()},
                            {"vanilla", vanilla},
                            {"r2m_before", before},
                            {"r2m_after", after}});
  }
  write_csv(out / "rm_accuracy.csv",
            {"run", "mode", "pairs", "vanilla_accuracy", "r2m_before", "r2m_after"}, rows);
  return side;
}

json divergence_study(const std::vector<RunDir>& runs, const fs::path& out) {
  std::vector<std::vector<CsvCell>> rows;
  std::vector<LineSeries> series;
  json side{{"study", "divergence"}, {"runs", json::array()}};
  for (const auto& run : runs) {
    std::ifstream in(run.path / "metrics.jsonl");
    if (!in) throw StudyError("run " + run.path.string() + " has no metrics.jsonl");
    LineSeries ls{run.label(), {}, {}};
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      if (j.contains("error")) throw StudyError("run " + run.path.string() + " ended in an error");
      const auto m = MetricsRecord::from_json(j);
      const double d = m.proxy_reward - m.gold_reward;
      rows.push_back({run.path.string(), m.mode, m.step, m.proxy_reward, m.gold_reward, d});
      ls.x.push_back(static_cast<double>(m.step));
      ls.y.push_back(d);
    }
    if (ls.x.empty()) throw StudyError("run " + run.path.string() + " has no metrics records");
    side["runs"].push_back({{"path", run.path.string()}, {"steps", ls.x.size()}});
    series.push_back(std::move(ls));
  }
  write_csv(out / "divergence.csv", {"run", "mode", "step", "proxy", "gold", "divergence"}, rows);
  write_svg(out / "divergence.svg",
            svg_line_chart("Proxy minus gold reward", "step", "proxy - gold", series));
  return side;
}

}  // namespace

json run_study(const std::string& name, const std::vector<fs::path>& run_paths,
               const fs::path& out_dir, const StudyParams& params) {
  json side;
  if (name == "alpha-sweep") {
    side = alpha_sweep_study(open_runs(run_paths, 1), out_dir, params);
  } else if (name == "reward-consistency") {
    side = reward_consistency_study(open_runs(run_paths, 1), out_dir, params);
  } else if (name == "similarity") {
    side = similarity_study_files(open_runs(run_paths, 1), out_dir, params);
  } else if (name == "rm-accuracy") {
    side = rm_accuracy_study(open_runs(run_paths, 1), out_dir);
  } else if (name == "divergence") {
    side = divergence_study(open_runs(run_paths, 1), out_dir);
  } else {
    throw StudyError("unknown study: " + name);
  }
  std::string file = name;
  for (char& c : file) {
    if (c == '-') c = '_';
  }
  write_json(out_dir / (file + ".json"), side);
  return side;
}

}  // namespace r2m
