#include "r2m/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "r2m/parallel.hpp"

namespace r2m {

Tensor mean_hidden(const Tensor& h) {
  if (h.shape.size() != 2 || h.rows() == 0) {
    throw std::invalid_argument("mean_hidden: need a nonempty matrix");
  }
  Tensor out = Tensor::matrix(1, h.cols());
  for (std::size_t r = 0; r < h.rows(); ++r) {
    for (std::size_t c = 0; c < h.cols(); ++c) out.data[c] += h.at(r, c);
  }
  for (double& v : out.data) v /= static_cast<double>(h.rows());
  return out;
}

double regularized_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("regularized_cosine: size mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::domain_error("regularized_cosine: zero vector");
  const double c = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return (c + 1.0) / 2.0;
}

SimilarityStudy similarity_gap(const std::vector<Tensor>& vectors, const std::vector<int>& labels,
                               int layer) {
  if (vectors.size() != labels.size()) {
    throw std::invalid_argument("similarity_gap: vectors and labels differ in length");
  }
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  for (const auto& [l, n] : counts) {
    if (n < 2) {
      throw std::invalid_argument("similarity_gap: label " + std::to_string(l) +
                                  " has fewer than 2 samples");
    }
  }
  SimilarityStudy s;
  s.layer = layer;
  double intra = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      const double c = regularized_cosine(vectors[i].data, vectors[j].data);
      if (labels[i] == labels[j]) {
        intra += c;
        ++s.intra_pairs;
      } else {
        cross += c;
        ++s.cross_pairs;
      }
    }
  }
  s.mu_intra = intra / static_cast<double>(s.intra_pairs);
  s.mu_cross = s.cross_pairs ? cross / static_cast<double>(s.cross_pairs) : 0.0;
  return s;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("pearson: need at least 3 pairs");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::domain_error("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

SimilarityReport similarity_study(const ParamSet& policy, const ParamSet& rm,
                                  const ModelConfig& cfg, const GoldTask& task,
                                  std::size_t n_per_label, std::size_t corr_pairs,
                                  std::uint64_t seed) {
  GoldTask clean = task;
  clean.bias = 0.0;
  const auto prefs = gen_preference_dataset(clean, n_per_label, seed);

  std::vector<TokenSeq> samples;
  std::vector<int> labels;
  for (const auto& p : prefs) {
    samples.push_back(p.chosen_pair());
    labels.push_back(1);
  }
  for (const auto& p : prefs) {
    samples.push_back(p.rejected_pair());
    labels.push_back(0);
  }

  const std::size_t n = samples.size();
  std::vector<std::vector<Tensor>> per_layer(static_cast<std::size_t>(cfg.layers),
                                             std::vector<Tensor>(n));
  std::vector<double> reward(n);
  parallel_for(n, [&](std::size_t i) {
    const auto states = policy_layer_states(policy, cfg, samples[i]);
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      per_layer[l][i] = mean_hidden(states[l].head_rows(samples[i].size() - 1));
    }
    reward[i] = r2m_reward(rm, cfg, RewardMode::kVanilla, samples[i], nullptr, 1.0);
  });

  SimilarityReport rep;
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    rep.layers.push_back(similarity_gap(per_layer[l], labels, static_cast<int>(l) + 1));
  }

  // Distinct unordered pairs drawn uniformly.
  const std::size_t total = n * (n - 1) / 2;
  if (corr_pairs > total) throw std::invalid_argument("similarity_study: too many pairs requested");
  Rng rng(seed, {0x636f7272ULL});
  std::set<std::pair<std::size_t, std::size_t>> used;
  const auto& deep = per_layer.back();
  while (used.size() < corr_pairs) {
    std::size_t a = rng.index(n), b = rng.index(n);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    if (!used.insert({a, b}).second) continue;
    rep.pair_similarity.push_back(regularized_cosine(deep[a].data, deep[b].data));
    rep.pair_reward_gap.push_back(std::abs(reward[a] - reward[b]));
  }
  rep.correlation = pearson(rep.pair_similarity, rep.pair_reward_gap);
  return rep;
}

std::vector<Group> frozen_batch(const ParamSet& policy, const ParamSet& rm, const ModelConfig& cfg,
                                const std::vector<TokenSeq>& queries, std::size_t groups,
                                int group_size, double temperature, int max_new,
                                std::uint64_t seed) {
  if (queries.empty()) throw std::invalid_argument("frozen_batch: no queries");
  std::vector<Group> batch(groups);
  parallel_for(groups, [&](std::size_t i) {
    Rng rng(seed, {i});
    Group g = sample_group(policy, cfg, queries[i % queries.size()], group_size, temperature,
                           max_new, rng);
    for (const auto& r : g.responses) g.rte.push_back(rm_backbone_rte(rm, cfg, r));
    batch[i] = std::move(g);
  });
  return batch;
}

double mean_degeneration(const std::vector<Group>& batch, const ParamSet& rm, double w,
                         double eps_std) {
  if (batch.empty()) throw std::invalid_argument("mean_degeneration: empty batch");
  std::vector<double> per(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& g = batch[i];
    std::vector<double> r;
    for (std::size_t j = 0; j < g.size(); ++j) {
      r.push_back(r2m_reward(rm, RewardMode::kR2M, g.rte[j], &g.hidden[j], w));
    }
    per[i] = degeneration_degree(r, eps_std);
  });
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

const AlphaCell& AlphaSweepResult::cell(std::size_t seed_index, std::size_t alpha_index) const {
  return cells.at(seed_index * grid.size() + alpha_index);
}

AlphaCell alpha_cell(const std::vector<Group>& batch, const ParamSet& rm, const ModelConfig& cfg,
                     const AlphaSweepConfig& sc, double alpha, std::uint64_t seed) {
  ParamSet head = rm;
  reset_cross_attention(head, cfg, seed);
  RMOptConfig opt;
  opt.alpha = alpha;
  opt.lr = sc.lr;
  opt.eps_std = sc.eps_std;
  AlphaCell c;
  c.alpha = alpha;
  c.seed = seed;
  for (int s = 0; s < sc.steps; ++s) {
    c.final_loss = update_rm(batch, head, cfg, opt, sc.w, RmUpdateMode::kR2M).loss;
  }
  c.mean_degeneration = mean_degeneration(batch, head, sc.w, sc.eps_std);
  return c;
}

AlphaSweepResult alpha_sweep(const std::vector<Group>& batch, const ParamSet& rm,
                             const ModelConfig& cfg, const AlphaSweepConfig& sc) {
  if (sc.grid.empty()) throw std::invalid_argument("alpha_sweep: empty grid");
  if (sc.seeds.empty()) throw std::invalid_argument("alpha_sweep: no seeds");
  for (std::size_t i = 1; i < sc.grid.size(); ++i) {
    if (!(sc.grid[i] > sc.grid[i - 1])) {
      throw std::invalid_argument("alpha_sweep: grid must be strictly increasing");
    }
  }
  AlphaSweepResult res;
  res.grid = sc.grid;
  res.seeds = sc.seeds;
  const std::size_t na = sc.grid.size();
  res.cells.resize(sc.seeds.size() * na);
  parallel_for(res.cells.size(), [&](std::size_t k) {
    res.cells[k] = alpha_cell(batch, rm, cfg, sc, sc.grid[k % na], sc.seeds[k / na]);
  });
  std::size_t ok = 0;
  for (std::size_t s = 0; s < sc.seeds.size(); ++s) {
    bool dec = true;
    for (std::size_t a = 1; a < na; ++a) {
      dec = dec && res.cell(s, a).mean_degeneration < res.cell(s, a - 1).mean_degeneration;
    }
    res.strictly_decreasing.push_back(dec);
    ok += dec;
  }
  res.verdict = static_cast<double>(ok) / static_cast<double>(sc.seeds.size());
  return res;
}

double rm_accuracy(const Scorer& scorer, const std::vector<PrefExample>& heldout) {
  if (heldout.empty()) throw std::invalid_argument("rm_accuracy: no pairs");
  std::vector<char> correct(heldout.size());
  parallel_for(heldout.size(), [&](std::size_t i) {
    correct[i] = scorer(heldout[i].chosen_pair()) > scorer(heldout[i].rejected_pair());
  });
  std::size_t n = 0;
  for (char c : correct) n += c;
  return static_cast<double>(n) / static_cast<double>(heldout.size());
}

Scorer vanilla_scorer(const ParamSet& rm, const ModelConfig& cfg) {
  return [&rm, &cfg](const TokenSeq& pair) {
    return r2m_reward(rm, cfg, RewardMode::kVanilla, pair, nullptr, 1.0);
  };
}

Scorer r2m_scorer(const ParamSet& rm, const ModelConfig& cfg, const ParamSet& policy, double w) {
  return [&rm, &cfg, &policy, w](const TokenSeq& pair) {
    const Tensor h = policy_forward(policy, cfg, pair).hidden;
    return r2m_reward(rm, cfg, RewardMode::kR2M, pair, &h, w);
  };
}

double mean_gold_reward(const ParamSet& policy, const ModelConfig& cfg, const GoldTask& task,
                        const std::vector<TokenSeq>& queries, int samples, double temperature,
                        std::uint64_t seed) {
  if (queries.empty() || samples < 1) throw std::invalid_argument("mean_gold_reward: nothing to sample");
  std::vector<double> per(queries.size());
  parallel_for(queries.size(), [&](std::size_t q) {
    Rng rng(seed, {q});
    double s = 0.0;
    for (int k = 0; k < samples; ++k) {
      s += gold_reward(task, sample_response(policy, cfg, queries[q], temperature, task.max_new, rng));
    }
    per[q] = s / samples;
  });
  double m = 0.0;
  for (double v : per) m += v;
  return m / static_cast<double>(per.size());
}

std::vector<ConsistencySeries> reward_consistency_probe(
    const std::vector<TokenSeq>& probes, const std::vector<ProbeSnapshot>& snapshots,
    const std::vector<std::pair<std::string, SnapshotScorer>>& variants, const ModelConfig& cfg,
    double temperature, int max_new, std::uint64_t seed) {
  if (probes.empty()) throw std::invalid_argument("reward_consistency_probe: no probes");
  std::vector<ConsistencySeries> out;
  for (const auto& [name, fn] : variants) {
    ConsistencySeries s;
    s.name = name;
    out.push_back(std::move(s));
  }
  for (const auto& snap : snapshots) {
    for (auto& s : out) s.steps.push_back(snap.step);
    if (!snap.policy) {
      for (auto& s : out) s.mean_reward.push_back(std::nullopt);
      continue;
    }
    // scores[v][q]
    std::vector<std::vector<double>> scores(variants.size(), std::vector<double>(probes.size()));
    parallel_for(probes.size(), [&](std::size_t q) {
      Rng rng(seed, {static_cast<std::uint64_t>(snap.step), q});
      const TokenSeq pair =
          sample_response(*snap.policy, cfg, probes[q], temperature, max_new, rng);
      const Tensor h = policy_forward(*snap.policy, cfg, pair).hidden;
      for (std::size_t v = 0; v < variants.size(); ++v) {
        scores[v][q] = variants[v].second(snap.step, pair, h);
      }
    });
    for (std::size_t v = 0; v < variants.size(); ++v) {
      double m = 0.0;
      for (double x : scores[v]) m += x;
      out[v].mean_reward.push_back(m / static_cast<double>(probes.size()));
    }
  }
  return out;
}

}  // namespace r2m
