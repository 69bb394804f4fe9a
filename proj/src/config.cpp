#include "r2m/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace r2m {

using nlohmann::json;

TrainMode parse_train_mode(const std::string& s) {
  if (s == "vanilla") return TrainMode::kVanilla;
  if (s == "r2m") return TrainMode::kR2M;
  if (s == "r2m-frozen") return TrainMode::kR2MFrozen;
  if (s == "r2m-noise") return TrainMode::kR2MNoise;
  if (s == "iterative-head") return TrainMode::kIterativeHead;
  if (s == "pretrained-rm") return TrainMode::kPretrainedRm;
  throw std::invalid_argument("unknown mode: " + s);
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kVanilla: return "vanilla";
    case TrainMode::kR2M: return "r2m";
    case TrainMode::kR2MFrozen: return "r2m-frozen";
    case TrainMode::kR2MNoise: return "r2m-noise";
    case TrainMode::kIterativeHead: return "iterative-head";
    case TrainMode::kPretrainedRm: return "pretrained-rm";
  }
  return "?";
}

RewardMode annotation_mode(TrainMode m) {
  switch (m) {
    case TrainMode::kR2M: return RewardMode::kR2M;
    case TrainMode::kR2MFrozen: return RewardMode::kR2MFrozen;
    case TrainMode::kR2MNoise: return RewardMode::kR2MNoise;
    default: return RewardMode::kVanilla;
  }
}

RmUpdateMode update_mode(TrainMode m) {
  switch (m) {
    case TrainMode::kR2M: return RmUpdateMode::kR2M;
    case TrainMode::kR2MNoise: return RmUpdateMode::kR2MNoise;
    case TrainMode::kIterativeHead: return RmUpdateMode::kIterativeHead;
    default: return RmUpdateMode::kNone;
  }
}

bool fuses_feedback(TrainMode m) { return uses_feedback(annotation_mode(m)); }

Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::kNone;
  if (s == "no-bt") return Ablation::kNoBt;
  if (s == "no-gre") return Ablation::kNoGre;
  throw std::invalid_argument("unknown ablation: " + s);
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoBt: return "no-bt";
    case Ablation::kNoGre: return "no-gre";
  }
  return "?";
}

double RunConfig::effective_alpha() const {
  switch (ablation) {
    case Ablation::kNoBt: return 1.0;
    case Ablation::kNoGre: return 0.0;
    default: return rm.alpha;
  }
}

RMOptConfig RunConfig::effective_rm() const {
  RMOptConfig r = rm;
  r.alpha = effective_alpha();
  return r;
}

void RunConfig::validate() const {
  model.validate();
  rl.validate();
  rm.validate();
  task.validate();
  if (omega_floor < 0.0 || omega_floor > 1.0) {
    throw std::invalid_argument("config: omega_floor outside [0, 1]");
  }
  if (snapshot_interval < 1) throw std::invalid_argument("config: snapshot_interval must be >= 1");
  if (task.vocab != model.vocab) throw std::invalid_argument("config: task.vocab != model.vocab");
  if (task.max_new != rl.max_new) throw std::invalid_argument("config: task.max_new != rl.max_new");
  if (model.eos_token != tokens::kEos) {
    throw std::invalid_argument("config: model.eos_token must be the task EOS token");
  }
  if (task.max_targets + 2 + rl.max_new > model.max_len) {
    throw std::invalid_argument("config: longest query + max_new exceeds model.max_len");
  }
  if (data.pref_pairs < 1 || data.query_pool < 1 || data.probe_queries < 1 ||
      data.heldout_pairs < 1 || data.offline_pairs < 1 || data.offline_epochs < 0) {
    throw std::invalid_argument("config: data sizes must be positive");
  }
  if (pretrain.epochs < 0 || pretrain.batch_size == 0 || pretrain.lr < 0.0) {
    throw std::invalid_argument("config: bad pretrain settings");
  }
}

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw std::invalid_argument("config: " + where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for " + path_ + key + ": " + e.what());
    }
  }

  template <class E, class Parse>
  void get_enum(const char* key, E& dst, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (present) dst = parse(s);
  }

  Reader sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw std::invalid_argument("config: unknown key " + path_ + k);
    }
  }

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  r.get_enum("mode", c.mode, parse_train_mode);
  r.get_enum("ablation", c.ablation, parse_ablation);
  r.get_enum("estimator", c.rl.estimator, parse_estimator);
  r.get("omega_floor", c.omega_floor);
  r.get("alpha", c.rm.alpha);
  r.get("snapshot_interval", c.snapshot_interval);
  r.get("log_wall_clock", c.log_wall_clock);
  r.get("out_dir", c.out_dir);

  auto m = r.sub("model");
  m.get("vocab", c.model.vocab);
  m.get("policy_dim", c.model.policy_dim);
  m.get("rm_dim", c.model.rm_dim);
  m.get("xattn_dim", c.model.xattn_dim);
  m.get("layers", c.model.layers);
  m.get("heads", c.model.heads);
  m.get("max_len", c.model.max_len);
  m.get("mlp_mult", c.model.mlp_mult);
  m.get("eos_token", c.model.eos_token);
  m.get("xattn_init_scale", c.model.xattn_init_scale);
  m.finish();

  auto rl = r.sub("rl");
  rl.get("groups", c.rl.groups);
  rl.get("group_size", c.rl.group_size);
  rl.get("clip", c.rl.clip);
  rl.get("kl_coef", c.rl.kl_coef);
  rl.get("temperature", c.rl.temperature);
  rl.get("epochs", c.rl.epochs);
  rl.get("policy_lr", c.rl.policy_lr);
  rl.get("total_steps", c.rl.total_steps);
  rl.get("max_new", c.rl.max_new);
  rl.get("grpo_eps", c.rl.grpo_eps);
  rl.finish();

  auto rm = r.sub("rm");
  rm.get("lr", c.rm.lr);
  rm.get("eps_std", c.rm.eps_std);
  std::string scope;
  rm.get("scope", scope);
  if (!scope.empty()) {
    if (scope == "head-only") {
      c.rm.scope = UpdateScope::kHeadOnly;
    } else if (scope == "full") {
      c.rm.scope = UpdateScope::kFull;
    } else {
      throw std::invalid_argument("config: rm.scope must be head-only or full");
    }
  }
  rm.finish();

  auto t = r.sub("task");
  t.get("min_targets", c.task.min_targets);
  t.get("max_targets", c.task.max_targets);
  t.get("coverage_weight", c.task.coverage_weight);
  t.get("length_penalty", c.task.length_penalty);
  t.get("ngram", c.task.ngram);
  t.get("bias", c.task.bias);
  t.finish();
  c.task.vocab = c.model.vocab;
  c.task.max_new = c.rl.max_new;

  auto p = r.sub("pretrain");
  p.get("epochs", c.pretrain.epochs);
  p.get("lr", c.pretrain.lr);
  p.get("batch_size", c.pretrain.batch_size);
  p.finish();

  auto d = r.sub("data");
  d.get("pref_pairs", c.data.pref_pairs);
  d.get("query_pool", c.data.query_pool);
  d.get("probe_queries", c.data.probe_queries);
  d.get("heldout_pairs", c.data.heldout_pairs);
  d.get("offline_pairs", c.data.offline_pairs);
  d.get("offline_epochs", c.data.offline_epochs);
  d.finish();

  r.finish();
  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"ablation", to_string(c.ablation)},
          {"estimator", to_string(c.rl.estimator)},
          {"omega_floor", c.omega_floor},
          {"alpha", c.rm.alpha},
          {"snapshot_interval", c.snapshot_interval},
          {"log_wall_clock", c.log_wall_clock},
          {"out_dir", c.out_dir},
          {"model",
           {{"vocab", c.model.vocab},
            {"policy_dim", c.model.policy_dim},
            {"rm_dim", c.model.rm_dim},
            {"xattn_dim", c.model.xattn_dim},
            {"layers", c.model.layers},
            {"heads", c.model.heads},
            {"max_len", c.model.max_len},
            {"mlp_mult", c.model.mlp_mult},
            {"eos_token", c.model.eos_token},
            {"xattn_init_scale", c.model.xattn_init_scale}}},
          {"rl",
           {{"groups", c.rl.groups},
            {"group_size", c.rl.group_size},
            {"clip", c.rl.clip},
            {"kl_coef", c.rl.kl_coef},
            {"temperature", c.rl.temperature},
            {"epochs", c.rl.epochs},
            {"policy_lr", c.rl.policy_lr},
            {"total_steps", c.rl.total_steps},
            {"max_new", c.rl.max_new},
            {"grpo_eps", c.rl.grpo_eps}}},
          {"rm",
           {{"lr", c.rm.lr},
            {"eps_std", c.rm.eps_std},
            {"scope", c.rm.scope == UpdateScope::kFull ? "full" : "head-only"}}},
          {"task",
           {{"min_targets", c.task.min_targets},
            {"max_targets", c.task.max_targets},
            {"coverage_weight", c.task.coverage_weight},
            {"length_penalty", c.task.length_penalty},
            {"ngram", c.task.ngram},
            {"bias", c.task.bias}}},
          {"pretrain",
           {{"epochs", c.pretrain.epochs},
            {"lr", c.pretrain.lr},
            {"batch_size", c.pretrain.batch_size}}},
          {"data",
           {{"pref_pairs", c.data.pref_pairs},
            {"query_pool", c.data.query_pool},
            {"probe_queries", c.data.probe_queries},
            {"heldout_pairs", c.data.heldout_pairs},
            {"offline_pairs", c.data.offline_pairs},
            {"offline_epochs", c.data.offline_epochs}}}};
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace r2m
