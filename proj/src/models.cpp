#include "r2m/models.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "r2m/numeric.hpp"

namespace r2m {

void ModelConfig::validate() const {
  if (vocab < 2 || policy_dim < 1 || rm_dim < 1 || xattn_dim < 1 || layers < 1 || heads < 1 ||
      max_len < 2 || mlp_mult < 1) {
    throw std::invalid_argument("model config: dimensions must be positive");
  }
  if (policy_dim % heads != 0 || rm_dim % heads != 0) {
    throw std::invalid_argument("model config: hidden sizes must divide by the head count");
  }
  if (eos_token < 0 || eos_token >= vocab) {
    throw std::invalid_argument("model config: eos token outside the vocabulary");
  }
}

void TokenSeq::validate(int vocab) const {
  if (ids.empty()) throw std::invalid_argument("token seq: empty");
  if (query_len == 0 || query_len > ids.size()) {
    throw std::invalid_argument("token seq: query prefix must be nonempty and within the sequence");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("token seq: id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

TransformerSpec policy_spec(const ModelConfig& cfg) {
  return {names::kPolicyPrefix, cfg.vocab, cfg.policy_dim, cfg.layers, cfg.heads,
          cfg.max_len,          cfg.mlp_mult, true};
}

TransformerSpec rm_backbone_spec(const ModelConfig& cfg) {
  return {names::kBackbonePrefix, cfg.vocab, cfg.rm_dim, cfg.layers, cfg.heads,
          cfg.max_len,            cfg.mlp_mult, false};
}

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

std::string layer_name(const TransformerSpec& s, int l, const char* leaf) {
  return s.prefix + "l" + std::to_string(l) + "." + leaf;
}

}  // namespace

void init_transformer(ParamSet& params, const TransformerSpec& s, Rng& rng) {
  const auto d = static_cast<std::size_t>(s.dim);
  const auto hidden = d * static_cast<std::size_t>(s.mlp_mult);
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * s.layers);
  params.add(s.prefix + "tok_emb", gaussian(static_cast<std::size_t>(s.vocab), d, 0.5, rng));
  params.add(s.prefix + "pos_emb", gaussian(static_cast<std::size_t>(s.max_len), d, 0.1, rng));
  for (int l = 0; l < s.layers; ++l) {
    params.add(layer_name(s, l, "ln1.g"), Tensor::matrix(1, d, 1.0));
    params.add(layer_name(s, l, "ln1.b"), Tensor::matrix(1, d, 0.0));
    params.add(layer_name(s, l, "attn.w_qkv"), gaussian(d, 3 * d, w_std, rng));
    params.add(layer_name(s, l, "attn.b_qkv"), Tensor::matrix(1, 3 * d, 0.0));
    params.add(layer_name(s, l, "attn.w_o"), gaussian(d, d, out_std, rng));
    params.add(layer_name(s, l, "attn.b_o"), Tensor::matrix(1, d, 0.0));
    params.add(layer_name(s, l, "ln2.g"), Tensor::matrix(1, d, 1.0));
    params.add(layer_name(s, l, "ln2.b"), Tensor::matrix(1, d, 0.0));
    params.add(layer_name(s, l, "mlp.w1"), gaussian(d, hidden, w_std, rng));
    params.add(layer_name(s, l, "mlp.b1"), Tensor::matrix(1, hidden, 0.0));
    params.add(layer_name(s, l, "mlp.w2"),
               gaussian(hidden, d, out_std / std::sqrt(static_cast<double>(s.mlp_mult)), rng));
    params.add(layer_name(s, l, "mlp.b2"), Tensor::matrix(1, d, 0.0));
  }
  params.add(s.prefix + "ln_f.g", Tensor::matrix(1, d, 1.0));
  params.add(s.prefix + "ln_f.b", Tensor::matrix(1, d, 0.0));
  if (s.lm_head) {
    params.add(s.prefix + "lm_head.w",
               gaussian(d, static_cast<std::size_t>(s.vocab), w_std, rng));
    params.add(s.prefix + "lm_head.b", Tensor::matrix(1, static_cast<std::size_t>(s.vocab), 0.0));
  }
}

TransformerVars transformer_forward(Tape& tape, const ParamSet& params, const TransformerSpec& s,
                                    std::span<const int> ids, bool frozen) {
  if (ids.empty()) throw std::invalid_argument("transformer: empty sequence");
  if (ids.size() > static_cast<std::size_t>(s.max_len)) {
    throw std::invalid_argument("transformer: sequence length " + std::to_string(ids.size()) +
                                " exceeds maximum " + std::to_string(s.max_len));
  }
  auto P = [&](const std::string& name) {
    return frozen ? tape.frozen_param(params, name) : tape.param(params, name);
  };
  const std::size_t S = ids.size();
  const std::size_t d = static_cast<std::size_t>(s.dim);
  const std::size_t dh = d / static_cast<std::size_t>(s.heads);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<int> id_vec(ids.begin(), ids.end());
  std::vector<int> positions(S);
  for (std::size_t i = 0; i < S; ++i) positions[i] = static_cast<int>(i);
  Var x = ad::add(ad::embedding(P(s.prefix + "tok_emb"), id_vec),
                  ad::embedding(P(s.prefix + "pos_emb"), positions));

  TransformerVars out;
  for (int l = 0; l < s.layers; ++l) {
    Var h = ad::layer_norm(x, P(layer_name(s, l, "ln1.g")), P(layer_name(s, l, "ln1.b")));
    Var qkv = ad::add_row(ad::matmul(h, P(layer_name(s, l, "attn.w_qkv"))),
                          P(layer_name(s, l, "attn.b_qkv")));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(s.heads));
    for (int hd = 0; hd < s.heads; ++hd) {
      const std::size_t off = static_cast<std::size_t>(hd) * dh;
      Var q = ad::slice_cols(qkv, off, off + dh);
      Var k = ad::slice_cols(qkv, d + off, d + off + dh);
      Var v = ad::slice_cols(qkv, 2 * d + off, 2 * d + off + dh);
      Var att = ad::softmax_rows(ad::scale(ad::matmul_bt(q, k), att_scale), /*causal=*/true);
      heads.push_back(ad::matmul(att, v));
    }
    Var merged = heads.size() == 1 ? heads[0] : ad::concat_cols(heads);
    x = ad::add(x, ad::add_row(ad::matmul(merged, P(layer_name(s, l, "attn.w_o"))),
                               P(layer_name(s, l, "attn.b_o"))));
    Var h2 = ad::layer_norm(x, P(layer_name(s, l, "ln2.g")), P(layer_name(s, l, "ln2.b")));
    Var mid = ad::gelu(ad::add_row(ad::matmul(h2, P(layer_name(s, l, "mlp.w1"))),
                                   P(layer_name(s, l, "mlp.b1"))));
    x = ad::add(x, ad::add_row(ad::matmul(mid, P(layer_name(s, l, "mlp.w2"))),
                               P(layer_name(s, l, "mlp.b2"))));
    out.layer_outputs.push_back(x);
  }
  out.final_hidden = ad::layer_norm(x, P(s.prefix + "ln_f.g"), P(s.prefix + "ln_f.b"));
  if (s.lm_head) {
    out.logits = ad::add_row(ad::matmul(out.final_hidden, P(s.prefix + "lm_head.w")),
                             P(s.prefix + "lm_head.b"));
  }
  return out;
}

ParamSet init_policy(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet params;
  Rng rng(seed, {0x706f6cULL});
  init_transformer(params, policy_spec(cfg), rng);
  return params;
}

PolicyOutput policy_forward(const ParamSet& params, const ModelConfig& cfg,
                            const TokenSeq& tokens) {
  tokens.validate(cfg.vocab);
  Tape tape(false);
  auto vars = transformer_forward(tape, params, policy_spec(cfg), tokens.ids);
  PolicyOutput out;
  out.logits = vars.logits.value();
  out.hidden = vars.final_hidden.value().head_rows(tokens.size() - 1);
  return out;
}

std::vector<Tensor> policy_layer_states(const ParamSet& params, const ModelConfig& cfg,
                                        const TokenSeq& tokens) {
  tokens.validate(cfg.vocab);
  Tape tape(false);
  auto vars = transformer_forward(tape, params, policy_spec(cfg), tokens.ids);
  std::vector<Tensor> states;
  for (std::size_t l = 0; l + 1 < vars.layer_outputs.size(); ++l) {
    states.push_back(vars.layer_outputs[l].value());
  }
  states.push_back(vars.final_hidden.value());
  return states;
}

TokenSeq sample_response(const ParamSet& params, const ModelConfig& cfg, const TokenSeq& query,
                         double temperature, int max_new, Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("sample_response: temperature must be > 0");
  query.validate(cfg.vocab);
  TokenSeq seq{std::vector<int>(query.ids.begin(),
                                query.ids.begin() + static_cast<std::ptrdiff_t>(query.query_len)),
               query.query_len};
  const auto spec = policy_spec(cfg);
  std::vector<double> scaled(static_cast<std::size_t>(cfg.vocab));
  for (int n = 0; n < max_new && seq.size() < static_cast<std::size_t>(cfg.max_len); ++n) {
    Tape tape(false);
    auto vars = transformer_forward(tape, params, spec, seq.ids);
    auto last = vars.logits.value().row_span(seq.size() - 1);
    for (std::size_t v = 0; v < scaled.size(); ++v) scaled[v] = last[v] / temperature;
    const auto probs = softmax(scaled);
    const int tok = static_cast<int>(rng.categorical(probs));
    seq.ids.push_back(tok);
    if (tok == cfg.eos_token) break;
  }
  return seq;
}

std::vector<double> response_logprobs(const PolicyOutput& out, const TokenSeq& tokens) {
  std::vector<double> lp;
  lp.reserve(tokens.size() - tokens.query_len);
  for (std::size_t p = tokens.query_len; p < tokens.size(); ++p) {
    const auto row = log_softmax(out.logits.row_span(p - 1));
    lp.push_back(row[static_cast<std::size_t>(tokens.ids[p])]);
  }
  return lp;
}

// --- reward model -----------------------------------------------------------

R2MHead R2MHead::from_params(const ParamSet& rm) {
  return {rm.get(names::kWq), rm.get(names::kWk), rm.get(names::kWv),
          rm.get(names::kWo), rm.get(names::kPhiW), rm.get(names::kPhiB)};
}

namespace {
void add_cross_attention(ParamSet& rm, const ModelConfig& cfg, Rng& rng) {
  const auto drm = static_cast<std::size_t>(cfg.rm_dim);
  const auto dp = static_cast<std::size_t>(cfg.policy_dim);
  const auto d = static_cast<std::size_t>(cfg.xattn_dim);
  const double s = cfg.xattn_init_scale;
  auto put = [&](const char* name, Tensor t) {
    if (rm.contains(name)) {
      rm.get_mut(name) = std::move(t);
    } else {
      rm.add(name, std::move(t));
    }
  };
  put(names::kWq, gaussian(drm, d, s / std::sqrt(static_cast<double>(drm)), rng));
  put(names::kWk, gaussian(dp, d, s / std::sqrt(static_cast<double>(dp)), rng));
  put(names::kWv, gaussian(dp, d, s / std::sqrt(static_cast<double>(dp)), rng));
  put(names::kWo, gaussian(d, drm, s / std::sqrt(static_cast<double>(d)), rng));
}
}  // namespace

ParamSet init_reward_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet rm;
  Rng rng(seed, {0x726dULL});
  init_transformer(rm, rm_backbone_spec(cfg), rng);
  const auto drm = static_cast<std::size_t>(cfg.rm_dim);
  rm.add(names::kPhiW, gaussian(drm, 1, 1.0 / std::sqrt(static_cast<double>(drm)), rng));
  rm.add(names::kPhiB, Tensor::matrix(1, 1, 0.0));
  Rng xrng(seed, {0x78617474ULL});
  add_cross_attention(rm, cfg, xrng);
  return rm;
}

void reset_cross_attention(ParamSet& rm, const ModelConfig& cfg, std::uint64_t seed) {
  Rng xrng(seed, {0x78617474ULL});
  add_cross_attention(rm, cfg, xrng);
}

Tensor rm_backbone_rte(const ParamSet& rm, const ModelConfig& cfg, const TokenSeq& pair) {
  pair.validate(cfg.vocab);
  Tape tape(false);
  auto vars = transformer_forward(tape, rm, rm_backbone_spec(cfg), pair.ids, /*frozen=*/true);
  const Tensor& h = vars.final_hidden.value();
  return Tensor::row(h.row_span(h.rows() - 1));
}

HeadVars bind_head(Tape& tape, const ParamSet& rm, bool train_cross_attention) {
  auto X = [&](const char* n) {
    return train_cross_attention ? tape.param(rm, n) : tape.frozen_param(rm, n);
  };
  return {X(names::kWq), X(names::kWk), X(names::kWv), X(names::kWo),
          tape.param(rm, names::kPhiW), tape.param(rm, names::kPhiB)};
}

namespace {
// Attention weights node of the most recent cross_attend, exposed for the
// plain-value wrapper.
struct CrossAttendVars {
  Var output;
  Var weights;
};

CrossAttendVars cross_attend_impl(const HeadVars& head, Var rte, Var hidden) {
  const Tensor& hv = hidden.value();
  if (hv.rows() == 0 || hv.size() == 0) throw std::invalid_argument("cross_attend: empty hidden");
  if (hv.cols() != head.w_k.value().rows()) {
    throw std::invalid_argument("cross_attend: hidden width " + std::to_string(hv.cols()) +
                                " does not match W_k rows " +
                                std::to_string(head.w_k.value().rows()));
  }
  if (rte.value().cols() != head.w_q.value().rows()) {
    throw std::invalid_argument("cross_attend: embedding width does not match W_q");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head.w_q.value().cols()));
  Var q = ad::matmul(rte, head.w_q);                  // 1 x d
  Var k = ad::matmul(hidden, head.w_k);               // (S-1) x d
  Var v = ad::matmul(hidden, head.w_v);               // (S-1) x d
  Var att = ad::softmax_rows(ad::scale(ad::matmul_bt(q, k), inv_sqrt_d));  // 1 x (S-1)
  return {ad::matmul(ad::matmul(att, v), head.w_o), att};
}
}  // namespace

Var cross_attend(const HeadVars& head, Var rte, Var hidden) {
  return cross_attend_impl(head, rte, hidden).output;
}

CrossAttention cross_attend(const R2MHead& head, const Tensor& rte, const Tensor& hidden) {
  Tape tape(false);
  HeadVars hv{tape.constant(head.w_q), tape.constant(head.w_k),   tape.constant(head.w_v),
              tape.constant(head.w_o), tape.constant(head.phi_w), tape.constant(head.phi_b)};
  auto vars = cross_attend_impl(hv, tape.constant(rte), tape.constant(hidden));
  return {vars.output.value(), vars.weights.value().data};
}

double omega(long t, long total, double floor) {
  if (total <= 0) throw std::invalid_argument("omega: total steps must be positive");
  if (t < 0 || t > total) throw std::invalid_argument("omega: step outside [0, total]");
  if (floor < 0.0 || floor > 1.0) throw std::invalid_argument("omega: floor outside [0, 1]");
  const double c = 0.5 * std::cos(static_cast<double>(t) / static_cast<double>(total) *
                                  std::numbers::pi) +
                   0.5;
  return std::max(c, floor);
}

Var fuse_rte(Var rte, Var aggregated, double w) {
  if (rte.value().size() != aggregated.value().size()) {
    throw std::invalid_argument("fuse_rte: dimension mismatch");
  }
  return ad::add(ad::scale(aggregated, 1.0 - w), ad::scale(rte, w));
}

Tensor fuse_rte(const Tensor& rte, const Tensor& aggregated, double w) {
  if (w < 0.0 || w > 1.0) throw std::invalid_argument("fuse_rte: weight outside [0, 1]");
  Tape tape(false);
  return fuse_rte(tape.constant(rte), tape.constant(aggregated), w).value();
}

Var score(const HeadVars& head, Var embedding) {
  if (embedding.value().cols() != head.phi_w.value().rows()) {
    throw std::invalid_argument("score: embedding width does not match the scoring head");
  }
  return ad::add(ad::matmul(embedding, head.phi_w), head.phi_b);
}

double score(const R2MHead& head, const Tensor& embedding) {
  Tape tape(false);
  HeadVars hv{tape.constant(head.w_q), tape.constant(head.w_k),   tape.constant(head.w_v),
              tape.constant(head.w_o), tape.constant(head.phi_w), tape.constant(head.phi_b)};
  return score(hv, tape.constant(embedding)).value().data[0];
}

RewardMode parse_reward_mode(const std::string& s) {
  if (s == "vanilla") return RewardMode::kVanilla;
  if (s == "r2m") return RewardMode::kR2M;
  if (s == "r2m-frozen") return RewardMode::kR2MFrozen;
  if (s == "r2m-noise") return RewardMode::kR2MNoise;
  throw std::invalid_argument("unknown reward mode: " + s);
}

std::string to_string(RewardMode m) {
  switch (m) {
    case RewardMode::kVanilla: return "vanilla";
    case RewardMode::kR2M: return "r2m";
    case RewardMode::kR2MFrozen: return "r2m-frozen";
    case RewardMode::kR2MNoise: return "r2m-noise";
  }
  return "?";
}

bool uses_feedback(RewardMode m) { return m != RewardMode::kVanilla; }

Tensor noise_like(const Tensor& h, Rng& rng) {
  const auto ms = mean_std_pop(h.data);
  Tensor out = h;
  for (auto& v : out.data) v = rng.normal(ms.mean, ms.std);
  return out;
}

Var reward_var(const HeadVars& head, RewardMode mode, const Tensor& rte, const Tensor* feedback,
               double w) {
  Tape& tape = *head.phi_w.tape;
  Var e = tape.constant(rte);
  if (!uses_feedback(mode)) return score(head, e);
  if (feedback == nullptr) throw std::invalid_argument("reward: feedback mode needs hidden states");
  Var agg = cross_attend(head, e, tape.constant(*feedback));
  return score(head, fuse_rte(e, agg, w));
}

double r2m_reward(const ParamSet& rm, RewardMode mode, const Tensor& rte, const Tensor* hidden,
                  double w, Rng* noise_rng) {
  if (w < 0.0 || w > 1.0) throw std::invalid_argument("r2m_reward: weight outside [0, 1]");
  Tape tape(false);
  HeadVars head = bind_head(tape, rm);
  if (mode == RewardMode::kR2MNoise) {
    if (hidden == nullptr || noise_rng == nullptr) {
      throw std::invalid_argument("r2m_reward: noise mode needs hidden states and a noise stream");
    }
    const Tensor noise = noise_like(*hidden, *noise_rng);
    return reward_var(head, mode, rte, &noise, w).value().data[0];
  }
  return reward_var(head, mode, rte, hidden, w).value().data[0];
}

double r2m_reward(const ParamSet& rm, const ModelConfig& cfg, RewardMode mode,
                  const TokenSeq& pair, const Tensor* hidden, double w, Rng* noise_rng) {
  return r2m_reward(rm, mode, rm_backbone_rte(rm, cfg, pair), hidden, w, noise_rng);
}

}  // namespace r2m
