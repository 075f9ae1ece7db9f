#include "flowdet/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>

#include "flowdet/error.hpp"
#include "flowdet/mathutil.hpp"

namespace flowdet {
namespace {

const std::vector<ConfigKey> kSchema = {
    {"seed", "int", "0", "master seed; FLOWDET_SEED env overrides"},
    // synthetic scenes
    {"scene.channels", "int", "3", "feature-grid channels"},
    {"scene.height", "int", "64", "grid height"},
    {"scene.width", "int", "64", "grid width"},
    {"scene.classes", "int", "3", "number of object classes K"},
    {"scene.min_objects", "int", "1", "min objects per scene"},
    {"scene.max_objects", "int", "4", "max objects per scene"},
    {"scene.noise_std", "real", "0.05", "additive noise sigma"},
    {"scene.min_size", "real", "0.1", "min box side (normalized)"},
    {"scene.max_size", "real", "0.5", "max box side (normalized)"},
    {"data.train_scenes", "int", "2000", "scenes in the training split"},
    {"data.val_scenes", "int", "200", "scenes in the held-out split"},
    // model
    {"n_train", "int", "64", "proposal boxes per image during training"},
    {"n_stages", "int", "2", "decoder head stages"},
    {"decoder.pooled", "int", "4", "RoI lattice size P"},
    {"decoder.hidden", "int", "64", "object feature width D"},
    {"decoder.time_dim", "int", "32", "time embedding size (even)"},
    {"decoder.ffn", "int", "128", "FFN inner width"},
    // loss
    {"lambda_cls", "real", "2.0", "classification loss weight"},
    {"lambda_l1", "real", "5.0", "l1 box loss weight"},
    {"lambda_giou", "real", "2.0", "gIoU loss weight"},
    {"top_k", "int", "4", "positive matches per ground truth"},
    {"loss.ignore_unselected", "bool", "false",
     "drop never-selected predictions from the classification loss"},
    {"lambda_prior", "real", "1.0", "dependent-prior statistics loss weight"},
    // coupling
    {"prior.kind", "string", "gauss",
     "gauss | derived | derived_bucketed | dependent"},
    {"prior.buckets", "int", "3", "area-quantile buckets (bucketed prior)"},
    {"match.strategy", "string", "hung_g", "rand | hung_c | hung_g | hung_i"},
    {"objective", "string", "cfm", "cfm | ddpm"},
    // training
    {"train.batch_size", "int", "4", "scenes per optimizer step"},
    {"train.steps", "int", "5000", "total optimizer steps"},
    {"train.warmup", "int", "200", "linear warmup steps"},
    {"train.lr", "real", "2.5e-4", "base learning rate"},
    {"train.weight_decay", "real", "1e-4", "decoupled weight decay"},
    {"train.grad_clip", "real", "1.0", "global grad-norm clip (<=0 off)"},
    {"train.eval_every", "int", "1000", "steps between held-out evals (0 off)"},
    {"train.log_every", "int", "100", "steps between metric lines"},
    // diffusion baseline
    {"ddpm.timesteps", "int", "1000", "diffusion schedule length T"},
    {"ddpm.scale", "real", "2.0", "signal scale on normalized boxes"},
    // sampling
    {"solver.kind", "string", "euler", "euler | heun | rk4 | dopri5 | ddim"},
    {"steps", "int", "1", "integration steps S"},
    {"n_eval", "int", "32", "prior samples at inference"},
    {"nms_iou", "real", "0.6", "ensemble NMS IoU threshold"},
    {"renewal_threshold", "real", "0.5", "box renewal score threshold"},
    {"solver.atol", "real", "1e-3", "dopri5 absolute tolerance"},
    {"solver.max_steps", "int", "32", "dopri5 attempted-step cap"},
    {"ensemble", "bool", "true", "union per-step detections before NMS"},
    // evaluation / sweeps
    {"eval.scenes", "int", "0", "held-out scenes to evaluate (0 = all)"},
    {"sweep.n_eval", "string", "32,48,64", "comma list for the sweep grid"},
    {"sweep.steps", "string", "1,2,3", "comma list for the sweep grid"},
    {"sweep.solvers", "string", "euler", "comma list for the sweep grid"},
    // ablation harness
    {"ablate.axes", "string", "prior,match,solver", "comma list of axes"},
    {"ablate.train_steps", "int", "800", "training steps per ablation cell"},
    {"ablate.train_scenes", "int", "256", "training scenes per ablation cell"},
    {"ablate.eval_scenes", "int", "64", "eval scenes per ablation cell"},
};

const ConfigKey* find_key(const std::string& name) {
  for (const auto& key : kSchema)
    if (name == key.name) return &key;
  return nullptr;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool parse_int(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end != s.c_str() + s.size()) return false;
  out = v;
  return true;
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end != s.c_str() + s.size() || !std::isfinite(v)) return false;
  out = v;
  return true;
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") { out = true; return true; }
  if (s == "false" || s == "0") { out = false; return true; }
  return false;
}

void check_enum(const RunConfig& cfg, const char* key,
                const std::vector<std::string>& allowed,
                std::vector<std::string>& errors) {
  const std::string& v = cfg.values.at(key);
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
    std::string joined;
    for (const auto& a : allowed) joined += (joined.empty() ? "" : "|") + a;
    errors.push_back(std::string(key) + ": '" + v + "' not one of " + joined);
  }
}

}  // namespace

const std::vector<ConfigKey>& config_schema() { return kSchema; }

std::int64_t RunConfig::get_int(const std::string& key) const {
  std::int64_t v = 0;
  if (!parse_int(values.at(key), v))
    raise(ErrorCode::ConfigError, key + ": not an integer");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  double v = 0.0;
  if (!parse_real(values.at(key), v))
    raise(ErrorCode::ConfigError, key + ": not a real number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(values.at(key), v))
    raise(ErrorCode::ConfigError, key + ": not a bool");
  return v;
}

const std::string& RunConfig::get_str(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) raise(ErrorCode::ConfigError, "unknown key " + key);
  return it->second;
}

RunConfig default_config() {
  RunConfig cfg;
  for (const auto& key : kSchema) cfg.values[key.name] = key.default_value;
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open config file: " + path);
  RunConfig cfg = default_config();
  std::vector<std::string> errors;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) + ": expected key=value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!find_key(key)) {
      errors.push_back("line " + std::to_string(line_no) + ": unknown key '" +
                       key + "'");
      continue;
    }
    cfg.values[key] = value;
  }
  if (!errors.empty()) {
    std::string joined = "config file " + path + ":";
    for (const auto& e : errors) joined += "\n  " + e;
    raise(ErrorCode::ConfigError, joined);
  }
  return cfg;
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  for (const auto& item : overrides) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) {
      errors.push_back("override '" + item + "' is not key=value");
      continue;
    }
    const std::string key = trim(item.substr(0, eq));
    const std::string value = trim(item.substr(eq + 1));
    if (!find_key(key)) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    config.values[key] = value;
  }
  if (!errors.empty()) {
    std::string joined = "bad overrides:";
    for (const auto& e : errors) joined += "\n  " + e;
    raise(ErrorCode::ConfigError, joined);
  }
}

void apply_env_seed(RunConfig& config) {
  if (const char* env = std::getenv("FLOWDET_SEED")) {
    config.values["seed"] = env;
  }
}

void validate_config(const RunConfig& config) {
  std::vector<std::string> errors;
  for (const auto& [key, value] : config.values) {
    const ConfigKey* schema = find_key(key);
    if (!schema) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    const std::string type = schema->type;
    if (type == "int") {
      std::int64_t v;
      if (!parse_int(value, v))
        errors.push_back(key + ": '" + value + "' is not an integer");
    } else if (type == "real") {
      double v;
      if (!parse_real(value, v))
        errors.push_back(key + ": '" + value + "' is not a real number");
    } else if (type == "bool") {
      bool v;
      if (!parse_bool(value, v))
        errors.push_back(key + ": '" + value + "' is not a bool");
    }
  }
  for (const auto& key : kSchema) {
    if (!config.values.count(key.name))
      errors.push_back(std::string("missing key '") + key.name + "'");
  }
  if (!errors.empty()) {
    std::string joined = "invalid config:";
    for (const auto& e : errors) joined += "\n  " + e;
    raise(ErrorCode::ConfigError, joined);
  }
  // Typed range/enum checks (values parse clean at this point).
  auto positive_int = [&](const char* key) {
    if (config.get_int(key) < 1)
      errors.push_back(std::string(key) + ": must be >= 1");
  };
  auto nonneg_int = [&](const char* key) {
    if (config.get_int(key) < 0)
      errors.push_back(std::string(key) + ": must be >= 0");
  };
  auto positive_real = [&](const char* key) {
    if (!(config.get_double(key) > 0.0))
      errors.push_back(std::string(key) + ": must be > 0");
  };
  auto nonneg_real = [&](const char* key) {
    if (config.get_double(key) < 0.0)
      errors.push_back(std::string(key) + ": must be >= 0");
  };
  auto unit_real = [&](const char* key) {
    const double v = config.get_double(key);
    if (!(v >= 0.0 && v <= 1.0))
      errors.push_back(std::string(key) + ": must be in [0,1]");
  };
  for (const char* key : {"scene.channels", "scene.height", "scene.width",
                          "scene.classes", "scene.min_objects", "scene.max_objects",
                          "data.train_scenes", "data.val_scenes", "n_train",
                          "n_stages", "decoder.pooled", "decoder.hidden",
                          "decoder.ffn", "top_k", "prior.buckets",
                          "train.batch_size", "train.steps", "ddpm.timesteps",
                          "steps", "n_eval", "solver.max_steps",
                          "ablate.train_steps", "ablate.train_scenes",
                          "ablate.eval_scenes"})
    positive_int(key);
  for (const char* key : {"train.warmup", "train.eval_every", "train.log_every",
                          "eval.scenes"})
    nonneg_int(key);
  for (const char* key : {"train.lr", "ddpm.scale", "solver.atol"})
    positive_real(key);
  for (const char* key : {"lambda_cls", "lambda_l1", "lambda_giou",
                          "lambda_prior", "train.weight_decay", "scene.noise_std"})
    nonneg_real(key);
  for (const char* key : {"nms_iou", "renewal_threshold"}) unit_real(key);
  if (config.get_int("decoder.time_dim") < 2 ||
      config.get_int("decoder.time_dim") % 2 != 0)
    errors.push_back("decoder.time_dim: must be even and >= 2");
  if (config.get_int("scene.min_objects") > config.get_int("scene.max_objects"))
    errors.push_back("scene.min_objects: exceeds scene.max_objects");
  if (!(config.get_double("scene.min_size") > 0.0) ||
      config.get_double("scene.max_size") > 1.0 ||
      config.get_double("scene.min_size") > config.get_double("scene.max_size"))
    errors.push_back("scene.min_size/max_size: need 0 < min <= max <= 1");
  check_enum(config, "prior.kind",
             {"gauss", "derived", "derived_bucketed", "dependent"}, errors);
  check_enum(config, "match.strategy", {"rand", "hung_c", "hung_g", "hung_i"},
             errors);
  check_enum(config, "solver.kind", {"euler", "heun", "rk4", "dopri5", "ddim"},
             errors);
  check_enum(config, "objective", {"cfm", "ddpm"}, errors);
  if (!errors.empty()) {
    std::string joined = "invalid config:";
    for (const auto& e : errors) joined += "\n  " + e;
    raise(ErrorCode::ConfigError, joined);
  }
}

std::string config_hash(const RunConfig& config) {
  return config_hash_hex(config.values);
}

SceneConfig to_scene_config(const RunConfig& config) {
  SceneConfig sc;
  sc.channels = static_cast<int>(config.get_int("scene.channels"));
  sc.height = static_cast<int>(config.get_int("scene.height"));
  sc.width = static_cast<int>(config.get_int("scene.width"));
  sc.num_classes = static_cast<int>(config.get_int("scene.classes"));
  sc.min_objects = static_cast<int>(config.get_int("scene.min_objects"));
  sc.max_objects = static_cast<int>(config.get_int("scene.max_objects"));
  sc.noise_std = config.get_double("scene.noise_std");
  sc.min_size = config.get_double("scene.min_size");
  sc.max_size = config.get_double("scene.max_size");
  return sc;
}

TrainConfig to_train_config(const RunConfig& config) {
  TrainConfig tc;
  tc.decoder.n_stages = static_cast<int>(config.get_int("n_stages"));
  tc.decoder.pooled = static_cast<int>(config.get_int("decoder.pooled"));
  tc.decoder.hidden = static_cast<int>(config.get_int("decoder.hidden"));
  tc.decoder.num_classes = static_cast<int>(config.get_int("scene.classes"));
  tc.decoder.time_dim = static_cast<int>(config.get_int("decoder.time_dim"));
  tc.decoder.ffn_dim = static_cast<int>(config.get_int("decoder.ffn"));
  tc.decoder.channels = static_cast<int>(config.get_int("scene.channels"));
  tc.weights.lambda_cls = config.get_double("lambda_cls");
  tc.weights.lambda_l1 = config.get_double("lambda_l1");
  tc.weights.lambda_giou = config.get_double("lambda_giou");
  tc.weights.top_k = static_cast<int>(config.get_int("top_k"));
  tc.strategy = match_strategy_from_name(config.get_str("match.strategy"));
  tc.prior_kind = prior_kind_from_name(config.get_str("prior.kind"));
  tc.prior_buckets = static_cast<int>(config.get_int("prior.buckets"));
  tc.n_train = static_cast<int>(config.get_int("n_train"));
  tc.batch_size = static_cast<int>(config.get_int("train.batch_size"));
  tc.total_steps = config.get_int("train.steps");
  tc.warmup_steps = config.get_int("train.warmup");
  tc.base_lr = config.get_double("train.lr");
  tc.weight_decay = config.get_double("train.weight_decay");
  tc.grad_clip = config.get_double("train.grad_clip");
  tc.lambda_prior = config.get_double("lambda_prior");
  tc.ignore_unselected = config.get_bool("loss.ignore_unselected");
  tc.seed = static_cast<std::uint64_t>(config.get_int("seed"));
  tc.objective = config.get_str("objective");
  tc.ddpm_timesteps = static_cast<int>(config.get_int("ddpm.timesteps"));
  tc.ddpm_scale = config.get_double("ddpm.scale");
  return tc;
}

SamplerConfig to_sampler_config(const RunConfig& config) {
  SamplerConfig sc;
  sc.n_eval = static_cast<int>(config.get_int("n_eval"));
  sc.steps = static_cast<int>(config.get_int("steps"));
  sc.solver = solver_kind_from_name(config.get_str("solver.kind"));
  sc.renewal_threshold = config.get_double("renewal_threshold");
  sc.nms_iou = config.get_double("nms_iou");
  sc.ensemble = config.get_bool("ensemble");
  sc.dopri_atol = config.get_double("solver.atol");
  sc.dopri_max_steps = static_cast<int>(config.get_int("solver.max_steps"));
  sc.ddpm_timesteps = static_cast<int>(config.get_int("ddpm.timesteps"));
  sc.ddpm_scale = config.get_double("ddpm.scale");
  return sc;
}

}  // namespace flowdet
