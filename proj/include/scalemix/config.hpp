#pragma once
// Run configuration: the model/data/train/eval knobs, the "desk" and "paper"
// presets, validation of the structural invariants, an INI-style text form
// (round-trippable, unknown keys rejected), and a stable content hash.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "scalemix/common.hpp"

namespace scalemix {

struct ModelConfig {
  // Global grid and channel structure. channels() stacks V_A upper-air
  // variables x P_levels pressure levels, then V_S surface variables, then
  // n_static static channels (terrain, land-sea mask) which are never
  // predicted.
  int64_t H = 32, W = 64;
  int64_t V_A = 2, P_levels = 2, V_S = 2, n_static = 2;
  int64_t P = 4;         // global patch size
  int64_t d = 96;        // token width
  int64_t M = 8;         // global encoder depth; M = k * L exactly
  int64_t k = 2;         // coupling blocks == regional encoder depth
  int64_t heads = 4;
  int64_t m = 8;         // key positions selected by the mixer
  int64_t region_h = 40, region_w = 60;  // fine cells
  int64_t p = 20;        // regional patch size; must equal fine_scale * P
  int64_t V_reg = 7;     // U, V, T, Q, P, TCC, SSRD
  int64_t fine_scale = 5;
  int64_t region_off_y = 40, region_off_x = 80;  // fine-cell offset
  int64_t d_pi = 32;     // position-identification conv width
  int64_t d_f = 16;      // Fourier lead-time embedding width
  int64_t ffn_mult = 4;
  std::string attn_scale = "per_head";     // per_head | full_dim
  std::string sampling = "adaptive";       // adaptive | random | fixed_grid
  std::string coupling = "bidirectional";  // bidirectional | unidirectional | none
  bool zero_residual_init = true;

  int64_t channels() const { return V_A * P_levels + V_S + n_static; }
  int64_t pred_channels() const { return channels() - n_static; }
  int64_t global_tokens() const { return (H / P) * (W / P); }
  int64_t region_tokens() const { return (region_h / p) * (region_w / p); }
  int64_t L() const { return M / k; }
  bool per_head_scale() const { return attn_scale == "per_head"; }
};

struct DataConfig {
  int64_t n_timesteps = 480;     // hourly analysis frames
  double wind_speed = 1.2;       // base advection speed, fine cells per hour
  double rotation_hours = 96.0;  // period of the wind-direction rotation
  double terrain_amp = 1.0;
  int64_t terrain_waves = 3;
  double kappa = 0.6;            // terrain modulation strength on wind
  double noise_scale = 0.02;
};

struct TrainConfig {
  int64_t pretrain_steps = 1200;
  int64_t steps = 2000;          // one-step regional training
  int64_t rollout_steps = 200;
  double lr = 3e-4;
  double rollout_lr = 1e-4;      // fixed during rollout fine-tuning
  int64_t warmup = 100;
  double min_lr = 1e-6;
  double weight_decay = 0.01;
  double clip = 1.0;
  int64_t horizon = 8;           // rollout steps during fine-tuning (48 h)
  int64_t val_every = 250;
  int64_t n_val_ics = 8;
};

struct EvalConfig {
  int64_t n_steps = 8;
  std::string stations;  // optional station CSV path
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
};

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return RunConfig{};
  if (name == "paper") {
    RunConfig cfg;
    cfg.model.H = 720;  // 721 latitude rows cropped to 720 so P=6 divides H
    cfg.model.W = 1440;
    cfg.model.V_A = 5;
    cfg.model.P_levels = 13;
    cfg.model.V_S = 7;
    cfg.model.n_static = 2;
    cfg.model.P = 6;
    cfg.model.d = 1536;
    cfg.model.M = 24;
    cfg.model.k = 4;
    cfg.model.heads = 8;
    cfg.model.m = 64;
    cfg.model.region_h = 750;
    cfg.model.region_w = 1200;
    cfg.model.p = 30;
    cfg.model.region_off_y = 1500;
    cfg.model.region_off_x = 3000;
    cfg.model.d_pi = 256;
    cfg.model.d_f = 128;
    return cfg;
  }
  throw ConfigError("unknown preset: " + name);
}

inline void validate(const RunConfig& cfg) {
  const ModelConfig& mc = cfg.model;
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (mc.H <= 0 || mc.W <= 0) fail("H and W must be positive");
  if (mc.P <= 0 || mc.H % mc.P != 0 || mc.W % mc.P != 0)
    fail("P must divide H and W");
  if (mc.V_A < 0 || mc.P_levels < 0 || mc.V_S < 0) fail("negative variable counts");
  if (mc.n_static != 2) fail("n_static must be 2 (terrain + land-sea mask)");
  if (mc.pred_channels() <= 0) fail("no predicted channels");
  if (mc.d <= 0 || mc.heads <= 0 || mc.d % mc.heads != 0)
    fail("heads must divide token width d");
  if (mc.k <= 0 || mc.M < mc.k || mc.M % mc.k != 0)
    fail("M must be a positive multiple of k (M = k*L)");
  if (mc.fine_scale != 5) fail("fine_scale must be 5 (p = 5*P alignment)");
  if (mc.p != mc.fine_scale * mc.P) fail("p must equal fine_scale * P");
  if (mc.V_reg <= 0) fail("V_reg must be positive");
  if (mc.region_h <= 0 || mc.region_w <= 0) fail("region extents must be positive");
  if (mc.region_h % mc.p != 0 || mc.region_w % mc.p != 0)
    fail("region extents must be divisible by the regional patch p");
  if (mc.region_off_y < 0 || mc.region_off_x < 0 ||
      mc.region_off_y % mc.p != 0 || mc.region_off_x % mc.p != 0)
    fail("region offset must be a nonnegative multiple of p for exact "
         "token alignment");
  if (mc.region_off_y + mc.region_h > mc.H * mc.fine_scale ||
      mc.region_off_x + mc.region_w > mc.W * mc.fine_scale)
    fail("region does not fit inside the fine grid");
  if (mc.m <= 0 || mc.m > mc.global_tokens())
    fail("m must satisfy 1 <= m <= N global tokens");
  if (mc.d_pi <= 0) fail("d_pi must be positive");
  if (mc.d_f <= 0 || mc.d_f % 2 != 0) fail("d_f must be positive and even");
  if (mc.ffn_mult <= 0) fail("ffn_mult must be positive");
  if (mc.attn_scale != "per_head" && mc.attn_scale != "full_dim")
    fail("attn_scale must be per_head or full_dim");
  if (mc.sampling != "adaptive" && mc.sampling != "random" &&
      mc.sampling != "fixed_grid")
    fail("sampling must be adaptive, random, or fixed_grid");
  if (mc.coupling != "bidirectional" && mc.coupling != "unidirectional" &&
      mc.coupling != "none")
    fail("coupling must be bidirectional, unidirectional, or none");
  if (cfg.data.n_timesteps < 12)
    fail("n_timesteps must be at least 12");
  if (cfg.data.rotation_hours <= 0.0) fail("rotation_hours must be positive");
  if (cfg.data.terrain_waves <= 0) fail("terrain_waves must be positive");
  if (cfg.train.steps < 0 || cfg.train.pretrain_steps < 0 ||
      cfg.train.rollout_steps < 0)
    fail("step counts must be nonnegative");
  if (cfg.train.lr <= 0.0 || cfg.train.rollout_lr <= 0.0 ||
      cfg.train.min_lr < 0.0)
    fail("learning rates must be positive");
  if (cfg.train.warmup < 0) fail("warmup must be nonnegative");
  if (cfg.train.clip <= 0.0) fail("clip must be positive");
  if (cfg.train.horizon < 1) fail("horizon must be at least 1");
  if (cfg.train.val_every <= 0 || cfg.train.n_val_ics <= 0)
    fail("validation cadence must be positive");
  if (cfg.eval.n_steps < 1) fail("eval n_steps must be at least 1");
}

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v +
                      "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v +
                      "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v +
                    "'");
}

}  // namespace detail

inline std::string config_to_string(const RunConfig& cfg) {
  std::ostringstream out;
  const ModelConfig& mc = cfg.model;
  out << "[model]\n";
  out << "H = " << mc.H << "\n";
  out << "W = " << mc.W << "\n";
  out << "V_A = " << mc.V_A << "\n";
  out << "P_levels = " << mc.P_levels << "\n";
  out << "V_S = " << mc.V_S << "\n";
  out << "n_static = " << mc.n_static << "\n";
  out << "P = " << mc.P << "\n";
  out << "d = " << mc.d << "\n";
  out << "M = " << mc.M << "\n";
  out << "k = " << mc.k << "\n";
  out << "heads = " << mc.heads << "\n";
  out << "m = " << mc.m << "\n";
  out << "region_h = " << mc.region_h << "\n";
  out << "region_w = " << mc.region_w << "\n";
  out << "p = " << mc.p << "\n";
  out << "V_reg = " << mc.V_reg << "\n";
  out << "fine_scale = " << mc.fine_scale << "\n";
  out << "region_off_y = " << mc.region_off_y << "\n";
  out << "region_off_x = " << mc.region_off_x << "\n";
  out << "d_pi = " << mc.d_pi << "\n";
  out << "d_f = " << mc.d_f << "\n";
  out << "ffn_mult = " << mc.ffn_mult << "\n";
  out << "attn_scale = " << mc.attn_scale << "\n";
  out << "sampling = " << mc.sampling << "\n";
  out << "coupling = " << mc.coupling << "\n";
  out << "zero_residual_init = " << (mc.zero_residual_init ? "true" : "false")
      << "\n";
  out << "\n[data]\n";
  out << "n_timesteps = " << cfg.data.n_timesteps << "\n";
  out << "wind_speed = " << fmt_f64(cfg.data.wind_speed) << "\n";
  out << "rotation_hours = " << fmt_f64(cfg.data.rotation_hours) << "\n";
  out << "terrain_amp = " << fmt_f64(cfg.data.terrain_amp) << "\n";
  out << "terrain_waves = " << cfg.data.terrain_waves << "\n";
  out << "kappa = " << fmt_f64(cfg.data.kappa) << "\n";
  out << "noise_scale = " << fmt_f64(cfg.data.noise_scale) << "\n";
  out << "\n[train]\n";
  out << "pretrain_steps = " << cfg.train.pretrain_steps << "\n";
  out << "steps = " << cfg.train.steps << "\n";
  out << "rollout_steps = " << cfg.train.rollout_steps << "\n";
  out << "lr = " << fmt_f64(cfg.train.lr) << "\n";
  out << "rollout_lr = " << fmt_f64(cfg.train.rollout_lr) << "\n";
  out << "warmup = " << cfg.train.warmup << "\n";
  out << "min_lr = " << fmt_f64(cfg.train.min_lr) << "\n";
  out << "weight_decay = " << fmt_f64(cfg.train.weight_decay) << "\n";
  out << "clip = " << fmt_f64(cfg.train.clip) << "\n";
  out << "horizon = " << cfg.train.horizon << "\n";
  out << "val_every = " << cfg.train.val_every << "\n";
  out << "n_val_ics = " << cfg.train.n_val_ics << "\n";
  out << "\n[eval]\n";
  out << "n_steps = " << cfg.eval.n_steps << "\n";
  out << "stations = " << cfg.eval.stations << "\n";
  return out.str();
}

inline uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64(config_to_string(cfg));
}

inline RunConfig parse_config_text(const std::string& text) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_int;
  using detail::trim;
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config: malformed section header: " + line);
      section = line.substr(1, line.size() - 2);
      if (section != "model" && section != "data" && section != "train" &&
          section != "eval")
        throw ConfigError("config: unknown section [" + section + "]");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected 'key = value', got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config: key '" + key + "' outside any section");
    ModelConfig& mc = cfg.model;
    if (section == "model") {
      if (key == "preset") {
        RunConfig base = preset(val);  // throws on unknown preset
        cfg = base;
      } else if (key == "H") mc.H = to_int(key, val);
      else if (key == "W") mc.W = to_int(key, val);
      else if (key == "V_A") mc.V_A = to_int(key, val);
      else if (key == "P_levels") mc.P_levels = to_int(key, val);
      else if (key == "V_S") mc.V_S = to_int(key, val);
      else if (key == "n_static") mc.n_static = to_int(key, val);
      else if (key == "P") mc.P = to_int(key, val);
      else if (key == "d") mc.d = to_int(key, val);
      else if (key == "M") mc.M = to_int(key, val);
      else if (key == "k") mc.k = to_int(key, val);
      else if (key == "heads") mc.heads = to_int(key, val);
      else if (key == "m") mc.m = to_int(key, val);
      else if (key == "region_h") mc.region_h = to_int(key, val);
      else if (key == "region_w") mc.region_w = to_int(key, val);
      else if (key == "p") mc.p = to_int(key, val);
      else if (key == "V_reg") mc.V_reg = to_int(key, val);
      else if (key == "fine_scale") mc.fine_scale = to_int(key, val);
      else if (key == "region_off_y") mc.region_off_y = to_int(key, val);
      else if (key == "region_off_x") mc.region_off_x = to_int(key, val);
      else if (key == "d_pi") mc.d_pi = to_int(key, val);
      else if (key == "d_f") mc.d_f = to_int(key, val);
      else if (key == "ffn_mult") mc.ffn_mult = to_int(key, val);
      else if (key == "attn_scale") mc.attn_scale = val;
      else if (key == "sampling") mc.sampling = val;
      else if (key == "coupling") mc.coupling = val;
      else if (key == "zero_residual_init") mc.zero_residual_init = to_bool(key, val);
      else throw ConfigError("config: unknown key '" + key + "' in [model]");
    } else if (section == "data") {
      if (key == "n_timesteps") cfg.data.n_timesteps = to_int(key, val);
      else if (key == "wind_speed") cfg.data.wind_speed = to_double(key, val);
      else if (key == "rotation_hours") cfg.data.rotation_hours = to_double(key, val);
      else if (key == "terrain_amp") cfg.data.terrain_amp = to_double(key, val);
      else if (key == "terrain_waves") cfg.data.terrain_waves = to_int(key, val);
      else if (key == "kappa") cfg.data.kappa = to_double(key, val);
      else if (key == "noise_scale") cfg.data.noise_scale = to_double(key, val);
      else throw ConfigError("config: unknown key '" + key + "' in [data]");
    } else if (section == "train") {
      if (key == "pretrain_steps") cfg.train.pretrain_steps = to_int(key, val);
      else if (key == "steps") cfg.train.steps = to_int(key, val);
      else if (key == "rollout_steps") cfg.train.rollout_steps = to_int(key, val);
      else if (key == "lr") cfg.train.lr = to_double(key, val);
      else if (key == "rollout_lr") cfg.train.rollout_lr = to_double(key, val);
      else if (key == "warmup") cfg.train.warmup = to_int(key, val);
      else if (key == "min_lr") cfg.train.min_lr = to_double(key, val);
      else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, val);
      else if (key == "clip") cfg.train.clip = to_double(key, val);
      else if (key == "horizon") cfg.train.horizon = to_int(key, val);
      else if (key == "val_every") cfg.train.val_every = to_int(key, val);
      else if (key == "n_val_ics") cfg.train.n_val_ics = to_int(key, val);
      else throw ConfigError("config: unknown key '" + key + "' in [train]");
    } else {  // eval
      if (key == "n_steps") cfg.eval.n_steps = to_int(key, val);
      else if (key == "stations") cfg.eval.stations = val;
      else throw ConfigError("config: unknown key '" + key + "' in [eval]");
    }
  }
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace scalemix
