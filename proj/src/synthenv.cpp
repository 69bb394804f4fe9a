#include "r2m/synthenv.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "json.hpp"
#include "r2m/numeric.hpp"
#include "r2m/optim.hpp"
#include "r2m/parallel.hpp"

namespace r2m {

void GoldTask::validate() const {
  if (vocab <= tokens::kFirstContent + 1) throw std::invalid_argument("gold task: vocab too small");
  if (min_targets < 1 || max_targets < min_targets) {
    throw std::invalid_argument("gold task: need 1 <= min_targets <= max_targets");
  }
  if (length_penalty < 0.0) throw std::invalid_argument("gold task: length penalty must be >= 0");
  if (max_new < 1) throw std::invalid_argument("gold task: max_new must be >= 1");
  if (bias < 0.0 || bias > 1.0) throw std::invalid_argument("gold task: bias outside [0, 1]");
  if (ngram.empty()) throw std::invalid_argument("gold task: empty n-gram");
  for (int t : ngram) {
    if (t < tokens::kFirstContent || t >= vocab) {
      throw std::invalid_argument("gold task: n-gram token out of content range");
    }
  }
  if (static_cast<int>(target_pool().size()) < max_targets) {
    throw std::invalid_argument("gold task: not enough target tokens");
  }
}

std::vector<int> GoldTask::target_pool() const {
  std::vector<int> pool;
  for (int t = tokens::kFirstContent; t < vocab; ++t) {
    if (std::find(ngram.begin(), ngram.end(), t) == ngram.end()) pool.push_back(t);
  }
  return pool;
}

TokenSeq gen_query(const GoldTask& task, Rng& rng) {
  auto pool = task.target_pool();
  const int m = task.min_targets + static_cast<int>(rng.index(task.max_targets - task.min_targets + 1));
  TokenSeq q;
  q.ids.push_back(tokens::kBos);
  for (int i = 0; i < m; ++i) {
    const std::size_t k = i + rng.index(pool.size() - i);
    std::swap(pool[i], pool[k]);
    q.ids.push_back(pool[i]);
  }
  q.ids.push_back(tokens::kSep);
  q.query_len = q.ids.size();
  return q;
}

TokenSeq gen_query(const GoldTask& task, std::uint64_t seed, std::uint64_t index) {
  Rng rng(seed, {index});
  return gen_query(task, rng);
}

std::vector<int> query_targets(std::span<const int> query) {
  std::vector<int> out;
  for (int t : query) {
    if (t >= tokens::kFirstContent) out.push_back(t);
  }
  return out;
}

std::size_t response_length(std::span<const int> response, int eos) {
  const auto it = std::find(response.begin(), response.end(), eos);
  return static_cast<std::size_t>(it - response.begin());
}

bool contains_ngram(std::span<const int> response, std::span<const int> ngram) {
  if (ngram.empty() || response.size() < ngram.size()) return false;
  return std::search(response.begin(), response.end(), ngram.begin(), ngram.end()) !=
         response.end();
}

double gold_reward(const GoldTask& task, const TokenSeq& pair) {
  const auto targets = query_targets(pair.query());
  const auto resp = pair.response();
  const std::size_t len = response_length(resp);
  const auto body = resp.first(len);
  double covered = 0.0;
  for (int t : targets) {
    if (std::find(body.begin(), body.end(), t) != body.end()) covered += 1.0;
  }
  const double coverage = targets.empty() ? 0.0 : covered / static_cast<double>(targets.size());
  return task.coverage_weight * coverage -
         task.length_penalty * static_cast<double>(len) / static_cast<double>(task.max_new);
}

TokenSeq join_pair(std::span<const int> query, std::span<const int> response) {
  TokenSeq s;
  s.ids.assign(query.begin(), query.end());
  s.ids.insert(s.ids.end(), response.begin(), response.end());
  s.query_len = query.size();
  return s;
}

std::vector<int> gen_response(const GoldTask& task, std::span<const int> query, Rng& rng) {
  const auto targets = query_targets(query);
  std::vector<int> filler = task.target_pool();
  const int n = static_cast<int>(task.ngram.size());
  const bool with_ngram = n <= task.max_new && rng.bernoulli(0.5);
  const int room = with_ngram ? task.max_new - n : task.max_new;
  const int len = with_ngram ? static_cast<int>(rng.index(room + 1))
                             : 1 + static_cast<int>(rng.index(room));
  std::vector<int> out;
  for (int i = 0; i < len; ++i) {
    if (!targets.empty() && rng.bernoulli(0.35)) {
      out.push_back(targets[rng.index(targets.size())]);
    } else {
      out.push_back(filler[rng.index(filler.size())]);
    }
  }
  if (with_ngram) {
    const auto at = out.begin() + static_cast<std::ptrdiff_t>(rng.index(out.size() + 1));
    out.insert(at, task.ngram.begin(), task.ngram.end());
  }
  if (static_cast<int>(out.size()) < task.max_new) out.push_back(tokens::kEos);
  return out;
}

namespace {

std::vector<PrefExample> gen_dataset(const GoldTask& task, std::size_t n, std::uint64_t seed,
                                     const std::vector<TokenSeq>* queries) {
  task.validate();
  if (n == 0) throw std::invalid_argument("gen_preference_dataset: n must be >= 1");
  if (queries && queries->empty()) throw std::invalid_argument("gen_preference_dataset: no queries");
  std::vector<PrefExample> out(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng(seed, {i});
    const TokenSeq q = queries ? (*queries)[i % queries->size()] : gen_query(task, rng);
    auto a = gen_response(task, q.ids, rng);
    auto b = gen_response(task, q.ids, rng);
    while (b == a) b = gen_response(task, q.ids, rng);
    const double ra = gold_reward(task, join_pair(q.ids, a));
    const double rb = gold_reward(task, join_pair(q.ids, b));
    bool a_wins = rng.uniform() < sigmoid(ra - rb);
    bool forced = false;
    if (rng.uniform() < task.bias) {
      const bool na = contains_ngram(a, task.ngram), nb = contains_ngram(b, task.ngram);
      if (na != nb) {
        a_wins = na;
        forced = true;
      }
    }
    PrefExample& ex = out[i];
    ex.query = q.ids;
    ex.chosen = a_wins ? a : b;
    ex.rejected = a_wins ? b : a;
    ex.gold_chosen = a_wins ? ra : rb;
    ex.gold_rejected = a_wins ? rb : ra;
    ex.bias_flipped = forced;
  });
  return out;
}

}  // namespace

std::vector<PrefExample> gen_preference_dataset(const GoldTask& task, std::size_t n,
                                                std::uint64_t seed) {
  return gen_dataset(task, n, seed, nullptr);
}

std::vector<PrefExample> gen_preference_dataset(const GoldTask& task, std::size_t n,
                                                std::uint64_t seed,
                                                const std::vector<TokenSeq>& queries) {
  return gen_dataset(task, n, seed, &queries);
}

void write_pref_jsonl(std::ostream& out, const std::vector<PrefExample>& data) {
  for (const auto& ex : data) {
    nlohmann::json j{{"query", ex.query},
                     {"chosen", ex.chosen},
                     {"rejected", ex.rejected},
                     {"gold_chosen", ex.gold_chosen},
                     {"gold_rejected", ex.gold_rejected},
                     {"bias_flipped", ex.bias_flipped}};
    out << j.dump() << '\n';
  }
}

std::vector<PrefExample> read_pref_jsonl(std::istream& in) {
  std::vector<PrefExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PrefExample ex;
      j.at("query").get_to(ex.query);
      j.at("chosen").get_to(ex.chosen);
      j.at("rejected").get_to(ex.rejected);
      j.at("gold_chosen").get_to(ex.gold_chosen);
      j.at("gold_rejected").get_to(ex.gold_rejected);
      j.at("bias_flipped").get_to(ex.bias_flipped);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("preference JSONL line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

Var vanilla_score_var(Tape& tape, const ParamSet& rm, const ModelConfig& cfg, const TokenSeq& s) {
  auto vars = transformer_forward(tape, rm, rm_backbone_spec(cfg), s.ids);
  const std::size_t last = s.size() - 1;
  HeadVars head = bind_head(tape, rm, /*train_cross_attention=*/false);
  return score(head, ad::slice_rows(vars.final_hidden, last, last + 1));
}

double vanilla_score(const ParamSet& rm, const ModelConfig& cfg, const TokenSeq& s) {
  return score(R2MHead::from_params(rm), rm_backbone_rte(rm, cfg, s));
}

}  // namespace

PretrainReport pretrain_vanilla_rm(ParamSet& rm, const ModelConfig& cfg,
                                   const std::vector<PrefExample>& prefs,
                                   const PretrainConfig& pc) {
  if (prefs.empty()) throw std::invalid_argument("pretrain_vanilla_rm: empty dataset");
  if (pc.epochs < 0 || pc.batch_size == 0) {
    throw std::invalid_argument("pretrain_vanilla_rm: bad epochs or batch size");
  }
  Adam adam(pc.lr);
  PretrainReport report;
  std::vector<std::size_t> order(prefs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    Rng shuffle(pc.seed, {static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.index(i + 1)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += pc.batch_size) {
      const std::size_t end = std::min(order.size(), start + pc.batch_size);
      std::vector<GradMap> grads(end - start);
      std::vector<double> losses(end - start);
      parallel_for(end - start, [&](std::size_t b) {
        const auto& ex = prefs[order[start + b]];
        Tape tape;
        Var lw = vanilla_score_var(tape, rm, cfg, ex.chosen_pair());
        Var ll = vanilla_score_var(tape, rm, cfg, ex.rejected_pair());
        Var margin = ad::sub(lw, ll);
        const double m = margin.value().data[0];
        // -log sigmoid(m), with d/dm = -sigmoid(-m).
        Var loss = tape.record(Tensor::scalar(-log_sigmoid(m)), {margin},
                               [margin, m](Tape& t, const Tensor& g) {
                                 t.grad_slot(margin).data[0] += -sigmoid(-m) * g.data[0];
                               });
        losses[b] = loss.value().data[0];
        tape.backward(loss);
        grads[b] = tape.param_grads();
      });
      GradMap total;
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = 0; b < grads.size(); ++b) {
        accumulate(total, grads[b], inv);
        epoch_loss += losses[b];
      }
      adam.step(rm, total);
    }
    report.final_loss = epoch_loss / static_cast<double>(prefs.size());
    report.epochs = epoch + 1;
  }
  report.train_accuracy = vanilla_accuracy(rm, cfg, prefs);
  return report;
}

double vanilla_accuracy(const ParamSet& rm, const ModelConfig& cfg,
                        const std::vector<PrefExample>& prefs) {
  if (prefs.empty()) throw std::invalid_argument("vanilla_accuracy: empty dataset");
  std::vector<int> correct(prefs.size());
  parallel_for(prefs.size(), [&](std::size_t i) {
    correct[i] = vanilla_score(rm, cfg, prefs[i].chosen_pair()) >
                 vanilla_score(rm, cfg, prefs[i].rejected_pair());
  });
  double n = 0.0;
  for (int c : correct) n += c;
  return n / static_cast<double>(prefs.size());
}

MisalignmentReport misalignment_from_scores(std::span<const double> rm_scores,
                                            std::span<const double> gold) {
  if (rm_scores.size() != gold.size()) throw std::invalid_argument("misalignment: size mismatch");
  if (rm_scores.empty()) throw std::invalid_argument("misalignment: empty probe set");
  const std::size_t n = gold.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = rm_scores[i] - gold[i];
  std::vector<double> sorted = diff;
  std::sort(sorted.begin(), sorted.end());
  const double median =
      n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  MisalignmentReport rep;
  rep.count = n;
  for (double d : diff) {
    rep.raw += std::abs(d);
    rep.normalized += std::abs(d - median);
  }
  rep.raw /= static_cast<double>(n);
  rep.normalized /= static_cast<double>(n);
  // Rounding can put the two a hair apart when the median offset is zero.
  rep.normalized = std::min(rep.normalized, rep.raw);
  return rep;
}

MisalignmentReport misalignment_error(const PairScorer& scorer, const ParamSet& policy,
                                      const ModelConfig& cfg, const std::vector<TokenSeq>& probes,
                                      const GoldTask& task, double temperature, Rng& rng) {
  if (probes.empty()) throw std::invalid_argument("misalignment_error: empty probe set");
  std::vector<double> rm(probes.size()), gold(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const TokenSeq s = sample_response(policy, cfg, probes[i], temperature, task.max_new, rng);
    const auto out = policy_forward(policy, cfg, s);
    rm[i] = scorer(s, out.hidden);
    gold[i] = gold_reward(task, s);
  }
  return misalignment_from_scores(rm, gold);
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return std::clamp(0.5 * s, 0.0, 1.0);
}

double tv_shift_on(const ParamSet& policy_t, const ParamSet& policy_0, const ModelConfig& cfg,
                   const std::vector<TokenSeq>& trajectories) {
  if (trajectories.empty()) throw std::invalid_argument("tv_shift: empty probe set");
  std::vector<double> sums(trajectories.size());
  std::vector<std::size_t> counts(trajectories.size());
  parallel_for(trajectories.size(), [&](std::size_t i) {
    const TokenSeq& s = trajectories[i];
    if (s.size() <= s.query_len) return;
    const auto a = policy_forward(policy_t, cfg, s);
    const auto b = policy_forward(policy_0, cfg, s);
    for (std::size_t pos = s.query_len - 1; pos + 1 < s.size(); ++pos) {
      sums[i] += tv_distance(softmax(a.logits.row_span(pos)), softmax(b.logits.row_span(pos)));
      ++counts[i];
    }
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    total += sums[i];
    n += counts[i];
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double tv_shift(const ParamSet& policy_t, const ParamSet& policy_0, const ModelConfig& cfg,
                const std::vector<TokenSeq>& probes, double temperature, int max_new, Rng& rng) {
  if (probes.empty()) throw std::invalid_argument("tv_shift: empty probe set");
  std::vector<TokenSeq> traj;
  for (const auto& q : probes) traj.push_back(sample_response(policy_t, cfg, q, temperature, max_new, rng));
  return tv_shift_on(policy_t, policy_0, cfg, traj);
}

}  // namespace r2m
