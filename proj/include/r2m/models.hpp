#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "r2m/autodiff.hpp"
#include "r2m/rng.hpp"
#include "r2m/tensor.hpp"

namespace r2m {

struct ModelConfig {
  int vocab = 64;
  int policy_dim = 32;
  int rm_dim = 48;
  /// Internal width of the cross-attention head.
  int xattn_dim = 16;
  int layers = 2;
  int heads = 2;
  int max_len = 24;
  int mlp_mult = 4;
  int eos_token = 3;
  /// Std of the cross-attention weights at initialisation, relative to 1/sqrt(fan_in).
  double xattn_init_scale = 0.5;

  void validate() const;
};

/// Query prefix followed by a (possibly empty) response.
struct TokenSeq {
  std::vector<int> ids;
  std::size_t query_len = 0;

  std::size_t size() const { return ids.size(); }
  std::span<const int> query() const { return {ids.data(), query_len}; }
  std::span<const int> response() const {
    return {ids.data() + query_len, ids.size() - query_len};
  }
  /// Throws std::invalid_argument unless 1 <= query_len <= size and ids < vocab.
  void validate(int vocab) const;

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

struct PolicyOutput {
  Tensor logits;  // S x V
  Tensor hidden;  // (S-1) x D_p, last-layer states at positions 0..S-2
};

/// Causal pre-LN transformer shared by the policy and the RM backbone.
struct TransformerSpec {
  std::string prefix;
  int vocab = 0;
  int dim = 0;
  int layers = 0;
  int heads = 0;
  int max_len = 0;
  int mlp_mult = 4;
  bool lm_head = false;
};

TransformerSpec policy_spec(const ModelConfig& cfg);
TransformerSpec rm_backbone_spec(const ModelConfig& cfg);

void init_transformer(ParamSet& params, const TransformerSpec& spec, Rng& rng);

struct TransformerVars {
  Var final_hidden;                 // S x dim, after the final layer norm
  std::vector<Var> layer_outputs;   // residual stream after each block
  Var logits;                       // S x vocab; invalid without an LM head
};

/// With `frozen`, parameters are bound without gradient tracking.
TransformerVars transformer_forward(Tape& tape, const ParamSet& params,
                                    const TransformerSpec& spec, std::span<const int> ids,
                                    bool frozen = false);

// --- policy -----------------------------------------------------------------

ParamSet init_policy(const ModelConfig& cfg, std::uint64_t seed);
PolicyOutput policy_forward(const ParamSet& params, const ModelConfig& cfg,
                            const TokenSeq& tokens);
/// Per-layer residual states (S x D_p each); the last entry is the
/// last-layer hidden state that also feeds the LM head.
std::vector<Tensor> policy_layer_states(const ParamSet& params, const ModelConfig& cfg,
                                        const TokenSeq& tokens);

/// Samples query + response from softmax(logits / temperature) with no
/// truncation. Stops after emitting cfg.eos_token or max_new tokens.
TokenSeq sample_response(const ParamSet& params, const ModelConfig& cfg, const TokenSeq& query,
                         double temperature, int max_new, Rng& rng);

/// Per-token log-probabilities of the response tokens under the policy.
std::vector<double> response_logprobs(const PolicyOutput& out, const TokenSeq& tokens);

// --- reward model -----------------------------------------------------------

namespace names {
inline constexpr const char* kWq = "head.w_q";
inline constexpr const char* kWk = "head.w_k";
inline constexpr const char* kWv = "head.w_v";
inline constexpr const char* kWo = "head.w_o";
inline constexpr const char* kPhiW = "phi.w";
inline constexpr const char* kPhiB = "phi.b";
inline constexpr const char* kBackbonePrefix = "rm.";
inline constexpr const char* kPolicyPrefix = "policy.";
}  // namespace names

/// Trainable head parameters: cross attention plus the scoring map.
struct R2MHead {
  Tensor w_q;    // D_rm x d
  Tensor w_k;    // D_p x d
  Tensor w_v;    // D_p x d
  Tensor w_o;    // d x D_rm
  Tensor phi_w;  // D_rm x 1
  Tensor phi_b;  // 1 x 1

  static R2MHead from_params(const ParamSet& rm);
  std::size_t width() const { return w_q.cols(); }
};

/// Backbone ("rm.*"), scoring head phi and cross-attention head in one set.
ParamSet init_reward_model(const ModelConfig& cfg, std::uint64_t seed);
/// Re-draws only the cross-attention weights.
void reset_cross_attention(ParamSet& rm, const ModelConfig& cfg, std::uint64_t seed);

/// Final-token, last-layer hidden vector of the RM backbone (1 x D_rm).
Tensor rm_backbone_rte(const ParamSet& rm, const ModelConfig& cfg, const TokenSeq& pair);

struct CrossAttention {
  Tensor output;                 // 1 x D_rm
  std::vector<double> weights;   // one per hidden row, summing to 1
};

CrossAttention cross_attend(const R2MHead& head, const Tensor& rte, const Tensor& hidden);

/// max(cos(t pi / T) / 2 + 1/2, floor). Throws for T = 0 or t outside [0, T].
double omega(long t, long total, double floor);

Tensor fuse_rte(const Tensor& rte, const Tensor& aggregated, double w);
double score(const R2MHead& head, const Tensor& embedding);

enum class RewardMode { kVanilla, kR2M, kR2MFrozen, kR2MNoise };
RewardMode parse_reward_mode(const std::string& s);
std::string to_string(RewardMode m);
bool uses_feedback(RewardMode m);

/// Gaussian matrix with the same shape, mean and population variance as `h`.
Tensor noise_like(const Tensor& h, Rng& rng);

/// Scalar reward for a precomputed reward-token embedding. `hidden` is the
/// policy feedback; `noise_rng` is required in noise mode.
double r2m_reward(const ParamSet& rm, RewardMode mode, const Tensor& rte, const Tensor* hidden,
                  double w, Rng* noise_rng = nullptr);
double r2m_reward(const ParamSet& rm, const ModelConfig& cfg, RewardMode mode,
                  const TokenSeq& pair, const Tensor* hidden, double w,
                  Rng* noise_rng = nullptr);

// Differentiable forms used by the optimisers. Head parameters are bound with
// Tape::param; `train_cross_attention = false` binds W_q..W_o as constants.
struct HeadVars {
  Var w_q, w_k, w_v, w_o, phi_w, phi_b;
};
HeadVars bind_head(Tape& tape, const ParamSet& rm, bool train_cross_attention = true);
Var cross_attend(const HeadVars& head, Var rte, Var hidden);
Var fuse_rte(Var rte, Var aggregated, double w);
Var score(const HeadVars& head, Var embedding);
/// Reward as a function of the head. `feedback` is the hidden matrix (already
/// noise-substituted when applicable); ignored when the mode has no feedback.
Var reward_var(const HeadVars& head, RewardMode mode, const Tensor& rte, const Tensor* feedback,
               double w);

}  // namespace r2m
