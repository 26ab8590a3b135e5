#pragma once
// Three-stage training protocol on the synthetic scenario:
//   1. pretrain_global        — the global stream alone on 6-hourly pairs,
//                               weighted global MAE;
//   2. train_one_step         — regional + mixer parameters with the global
//                               stream frozen, Σ_{dt=1..6} regional MAE;
//   3. train_rollout_finetune — backprop through the full autoregressive
//                               chain, global + regional MAE over all steps,
//                               fixed learning rate.
// The model trains in z-scored space (training-split statistics only);
// validation MAE is reported in physical units. Everything is deterministic
// given (config, seed): anchor draws, mixer sampling, validation order, and
// the loss summation order are all fixed.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "scalemix/coupled.hpp"
#include "scalemix/data.hpp"
#include "scalemix/grid1.hpp"
#include "scalemix/metrics.hpp"
#include "scalemix/optimizer.hpp"

namespace scalemix {

struct TrainContext {
  RunConfig cfg;
  SyntheticDataset ds;      // physical units
  Splits splits;
  ZStats reg_stats, glob_stats, topo_stats, mask_stats;  // training split only
  std::vector<Tensor> reg_z, glob_z;
  Tensor topo_z, mask_z;
};

inline TrainContext make_context(const RunConfig& cfg, uint64_t seed) {
  validate(cfg);
  TrainContext ctx;
  ctx.cfg = cfg;
  ctx.ds = generate_synthetic(cfg, seed);
  ctx.splits = chronological_splits(cfg);
  const int64_t train_end = ctx.splits.train.back() + 6;  // last training truth
  ctx.reg_stats = compute_zstats(std::vector<Tensor>(
      ctx.ds.regional.begin(), ctx.ds.regional.begin() + train_end + 1));
  ctx.glob_stats = compute_zstats(std::vector<Tensor>(
      ctx.ds.global.begin(), ctx.ds.global.begin() + train_end / 6 + 1));
  ctx.topo_stats = compute_zstats({ctx.ds.topography});
  ctx.mask_stats = compute_zstats({ctx.ds.land_sea_mask});
  for (const Tensor& f : ctx.ds.regional)
    ctx.reg_z.push_back(zscore(f, ctx.reg_stats));
  for (const Tensor& f : ctx.ds.global)
    ctx.glob_z.push_back(zscore(f, ctx.glob_stats));
  ctx.topo_z = zscore(ctx.ds.topography, ctx.topo_stats);
  ctx.mask_z = zscore(ctx.ds.land_sea_mask, ctx.mask_stats);
  return ctx;
}

inline RegionalState z_state_at(const TrainContext& ctx, int64_t t0) {
  if (t0 < 5 || t0 >= static_cast<int64_t>(ctx.reg_z.size()))
    throw ContractError("z_state_at: hour " + std::to_string(t0) +
                        " lacks a six-hour history");
  RegionalState st;
  for (int64_t t = t0 - 5; t <= t0; ++t)
    st.history.push_back(ctx.reg_z[static_cast<size_t>(t)]);
  st.topography = ctx.topo_z;
  st.land_sea_mask = ctx.mask_z;
  st.hour_of_day = static_cast<double>(t0 % 24);
  st.day_of_year = static_cast<double>((t0 / 24) % 365);
  return st;
}

inline std::vector<std::string> regional_variable_names(const ModelConfig& mc) {
  if (mc.V_reg == 7) return {"U", "V", "T", "Q", "P", "TCC", "SSRD"};
  std::vector<std::string> out;
  for (int64_t v = 0; v < mc.V_reg; ++v) out.push_back("v" + std::to_string(v));
  return out;
}

struct LogRow {
  int64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::vector<double> val_mae;  // per regional variable, physical units
};

struct StageResult {
  std::vector<LogRow> log;
};

namespace detail {

inline std::string hex64(uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline std::vector<int64_t> val_anchor_list(const TrainContext& ctx) {
  if (ctx.splits.val.empty())
    throw ConfigError("training: the validation split is empty");
  const size_t n = std::min(ctx.splits.val.size(),
                            static_cast<size_t>(ctx.cfg.train.n_val_ics));
  return std::vector<int64_t>(ctx.splits.val.begin(),
                              ctx.splits.val.begin() + static_cast<int64_t>(n));
}

// Validation MAE of carrying the anchor frame to every lead hour — what the
// identity-initialized regional model forecasts.
inline std::vector<double> persistence_val_mae(
    const TrainContext& ctx, const std::vector<int64_t>& anchors) {
  const int64_t V = ctx.cfg.model.V_reg;
  std::vector<double> acc(static_cast<size_t>(V), 0.0);
  for (int64_t t0 : anchors)
    for (int64_t dt = 1; dt <= 6; ++dt) {
      const Tensor& base = ctx.ds.regional[static_cast<size_t>(t0)];
      const Tensor& truth = ctx.ds.regional[static_cast<size_t>(t0 + dt)];
      for (int64_t i = 0; i < base.numel() / V; ++i)
        for (int64_t v = 0; v < V; ++v)
          acc[static_cast<size_t>(v)] +=
              std::abs(base[i * V + v] - truth[i * V + v]);
    }
  const double cells = static_cast<double>(ctx.ds.regional[0].numel() / V * 6 *
                                           static_cast<int64_t>(anchors.size()));
  for (double& x : acc) x /= cells;
  return acc;
}

inline Tensor pred_channel_slice(const Tensor& frame, const ModelConfig& mc) {
  const int64_t HW = mc.H * mc.W, C = mc.channels(), Cp = mc.pred_channels();
  std::vector<double> v(static_cast<size_t>(HW * Cp));
  for (int64_t i = 0; i < HW; ++i)
    for (int64_t c = 0; c < Cp; ++c)
      v[static_cast<size_t>(i * Cp + c)] = frame[i * C + c];
  return Tensor({mc.H, mc.W, Cp}, std::move(v));
}

inline void write_csv_header(std::ostream* csv, const ModelConfig& mc) {
  if (!csv) return;
  *csv << "step,lr,train_loss";
  for (const std::string& n : regional_variable_names(mc))
    *csv << ",val_mae_" << n;
  *csv << "\n";
}

inline void write_csv_row(std::ostream* csv, const LogRow& row) {
  if (!csv) return;
  *csv << row.step << "," << fmt_f64(row.lr) << "," << fmt_f64(row.train_loss);
  for (double v : row.val_mae) *csv << "," << fmt_f64(v);
  *csv << "\n";
}

inline std::vector<std::pair<std::string, Tensor>> trainable_grads(
    Binder& B) {
  Graph& g = B.graph();
  std::vector<std::pair<std::string, Tensor>> grads;
  for (const auto& [name, bound] : B.bound())
    if (g.requires_grad(bound)) grads.emplace_back(name, g.grad_or_zero(bound));
  return grads;
}

inline void guard_finite(double loss, const std::string& stage, int64_t step) {
  if (!std::isfinite(loss))
    throw DivergenceError(stage + ": training loss became non-finite at step " +
                          std::to_string(step));
}

}  // namespace detail

// Per-variable one-step validation MAE in physical units, averaged over the
// six lead hours and the given anchors.
inline std::vector<double> validate_one_step(const ParamStore& store,
                                             const TrainContext& ctx,
                                             const std::vector<int64_t>& anchors,
                                             uint64_t seed) {
  const ModelConfig& mc = ctx.cfg.model;
  const RegionGeom geom = RegionGeom::from_config(mc);
  const int64_t V = mc.V_reg;
  std::vector<double> acc(static_cast<size_t>(V), 0.0);
  for (int64_t t0 : anchors) {
    Graph g;
    Binder B(g, store, /*trainable=*/false);
    Rng mix = named_rng(seed, "val/mix/" + std::to_string(t0));
    ForecastBundle fb = forward_step(B, mc, geom, ctx.glob_z[static_cast<size_t>(t0 / 6)],
                                     z_state_at(ctx, t0), &mix);
    for (int64_t dt = 1; dt <= 6; ++dt) {
      Tensor pred = zscore_inverse(fb.regional[static_cast<size_t>(dt - 1)],
                                   ctx.reg_stats);
      std::vector<double> mae = per_variable_mae(
          pred, ctx.ds.regional[static_cast<size_t>(t0 + dt)]);
      for (int64_t v = 0; v < V; ++v) acc[static_cast<size_t>(v)] += mae[static_cast<size_t>(v)];
    }
  }
  for (double& x : acc) x /= static_cast<double>(6 * anchors.size());
  return acc;
}

// Rollout MAE per lead hour (index l = lead l+1), averaged over variables,
// cells, and anchors, in physical units.
inline std::vector<double> rollout_lead_mae(const ParamStore& store,
                                            const TrainContext& ctx,
                                            const std::vector<int64_t>& anchors,
                                            int64_t n_steps, uint64_t seed) {
  const ModelConfig& mc = ctx.cfg.model;
  const RegionGeom geom = RegionGeom::from_config(mc);
  std::vector<double> acc(static_cast<size_t>(6 * n_steps), 0.0);
  for (int64_t t0 : anchors) {
    if (t0 + 6 * n_steps >= static_cast<int64_t>(ctx.reg_z.size()))
      throw ContractError("rollout_lead_mae: anchor " + std::to_string(t0) +
                          " lacks truth " + std::to_string(6 * n_steps) +
                          " hours ahead");
    Graph g;
    Binder B(g, store, /*trainable=*/false);
    Rng mix = named_rng(seed, "val/mix/" + std::to_string(t0));
    std::vector<ForecastBundle> steps =
        rollout(B, mc, geom, ctx.glob_z[static_cast<size_t>(t0 / 6)],
                z_state_at(ctx, t0), n_steps, &mix);
    for (int64_t s = 0; s < n_steps; ++s)
      for (int64_t dt = 1; dt <= 6; ++dt) {
        const int64_t lead = 6 * s + dt;
        Tensor pred = zscore_inverse(
            steps[static_cast<size_t>(s)].regional[static_cast<size_t>(dt - 1)],
            ctx.reg_stats);
        const Tensor& truth = ctx.ds.regional[static_cast<size_t>(t0 + lead)];
        double mae = 0.0;
        for (int64_t i = 0; i < pred.numel(); ++i)
          mae += std::abs(pred[i] - truth[i]);
        acc[static_cast<size_t>(lead - 1)] +=
            mae / static_cast<double>(pred.numel());
      }
  }
  for (double& x : acc) x /= static_cast<double>(anchors.size());
  return acc;
}

// ----- stage 1: global pretraining --------------------------------------------------

inline StageResult pretrain_global(ParamStore& store, const TrainContext& ctx,
                                   uint64_t seed, std::ostream* csv = nullptr) {
  const ModelConfig& mc = ctx.cfg.model;
  const TrainConfig& tc = ctx.cfg.train;
  const int64_t total = tc.pretrain_steps;

  // 6-hourly training pairs (g, g+1) whose truth lies inside the train range.
  const int64_t g_last = (ctx.splits.train.back() + 6) / 6;
  std::vector<int64_t> pairs;
  for (int64_t gi = 0; gi + 1 <= g_last; ++gi) pairs.push_back(gi);
  if (pairs.empty())
    throw ConfigError("pretrain-global: no 6-hourly training pairs");
  std::vector<Tensor> targets;  // z-scored predicted-channel slices
  for (size_t gi = 0; gi < ctx.glob_z.size(); ++gi)
    targets.push_back(detail::pred_channel_slice(ctx.glob_z[gi], mc));

  auto pair_loss = [&](Binder& B, int64_t gi) {
    Graph& g = B.graph();
    Tensor pred = global_forward(B, mc, ctx.glob_z[static_cast<size_t>(gi)]);
    return global_weighted_mae(g, mc, pred,
                               g.constant(targets[static_cast<size_t>(gi + 1)]));
  };

  // The regional model is untouched in this stage, so its validation MAE is
  // the persistence baseline; computed once, repeated in every row.
  const std::vector<double> persist =
      detail::persistence_val_mae(ctx, detail::val_anchor_list(ctx));

  StageResult res;
  detail::write_csv_header(csv, mc);
  auto log_row = [&](int64_t step, double lr, double train_loss) {
    LogRow row{step, lr, train_loss, persist};
    res.log.push_back(row);
    detail::write_csv_row(csv, row);
  };

  {
    Graph g;
    Binder B(g, store, /*trainable=*/false);
    const double l0 = pair_loss(B, pairs[0])[0];
    detail::guard_finite(l0, "pretrain-global", 0);
    log_row(0, lr_at(tc.lr, tc.min_lr, tc.warmup, 0, total), l0);
  }

  Rng order = named_rng(seed, "train/anchors");
  AdamW opt(tc.weight_decay, tc.clip);
  double since_sum = 0.0;
  int64_t since_n = 0;
  for (int64_t u = 1; u <= total; ++u) {
    const int64_t gi = pairs[static_cast<size_t>(
        order.uniform_int(static_cast<int64_t>(pairs.size())))];
    Graph g;
    Binder B(g, store, /*trainable=*/true);
    B.set_trainable_filter(
        [](const std::string& n) { return n.rfind("global.", 0) == 0; });
    Tensor loss = pair_loss(B, gi);
    detail::guard_finite(loss[0], "pretrain-global", u);
    g.backward(loss);
    const double lr = lr_at(tc.lr, tc.min_lr, tc.warmup, u - 1, total);
    opt.step(store, detail::trainable_grads(B), lr);
    since_sum += loss[0];
    ++since_n;
    if (u % tc.val_every == 0 || u == total) {
      log_row(u, lr, since_sum / static_cast<double>(since_n));
      since_sum = 0.0;
      since_n = 0;
      if (u == total) break;
    }
  }
  return res;
}

// ----- stages 2 and 3: regional training with the global stream frozen ---------------

namespace detail {

struct RegionalStageSpec {
  std::string name;        // for logs and error messages
  int64_t total = 0;       // update count
  int64_t horizon = 1;     // rollout steps per update
  bool cosine = true;      // warmup+cosine (stage 2) vs fixed lr (stage 3)
  bool global_term = false;  // add the global MAE to the objective
};

inline StageResult run_regional_stage(ParamStore& store, const TrainContext& ctx,
                                      uint64_t seed, std::ostream* csv,
                                      const RegionalStageSpec& stage) {
  const ModelConfig& mc = ctx.cfg.model;
  const TrainConfig& tc = ctx.cfg.train;
  const RegionGeom geom = RegionGeom::from_config(mc);
  const bool coupled = mc.coupling != "none";
  const int64_t n = ctx.cfg.data.n_timesteps;

  std::vector<int64_t> pool;
  for (int64_t t0 : ctx.splits.train)
    if (t0 + 6 * stage.horizon <= n - 1) pool.push_back(t0);
  if (pool.empty())
    throw ConfigError(stage.name + ": no training anchor leaves room for a " +
                      std::to_string(stage.horizon) + "-step rollout");

  auto objective = [&](Binder& B, int64_t t0, Rng* mix) {
    Graph& g = B.graph();
    std::vector<ForecastBundle> steps =
        rollout(B, mc, geom, ctx.glob_z[static_cast<size_t>(t0 / 6)],
                z_state_at(ctx, t0), stage.horizon, mix);
    Tensor loss;
    bool first = true;
    for (int64_t s = 0; s < stage.horizon; ++s) {
      if (stage.global_term && coupled) {
        Tensor gt = pred_channel_slice(
            ctx.glob_z[static_cast<size_t>(t0 / 6 + s + 1)], mc);
        Tensor term = global_weighted_mae(g, mc, steps[static_cast<size_t>(s)].global,
                                          g.constant(gt));
        loss = first ? term : g.add(loss, term);
        first = false;
      }
      for (int64_t dt = 1; dt <= 6; ++dt) {
        Tensor term = regional_mae(
            g, steps[static_cast<size_t>(s)].regional[static_cast<size_t>(dt - 1)],
            g.constant(ctx.reg_z[static_cast<size_t>(t0 + 6 * s + dt)]));
        loss = first ? term : g.add(loss, term);
        first = false;
      }
    }
    return loss;
  };

  auto lr_of = [&](int64_t u) {  // u is the 1-based update index
    return stage.cosine
               ? lr_at(tc.lr, tc.min_lr, tc.warmup, u - 1, stage.total)
               : tc.rollout_lr;
  };
  const std::vector<int64_t> va = val_anchor_list(ctx);

  StageResult res;
  write_csv_header(csv, mc);
  auto log_row = [&](int64_t step, double lr, double train_loss) {
    LogRow row{step, lr, train_loss, validate_one_step(store, ctx, va, seed)};
    res.log.push_back(row);
    write_csv_row(csv, row);
  };

  {
    Graph g;
    Binder B(g, store, /*trainable=*/false);
    Rng mix = named_rng(seed, "train/mix/0");
    const double l0 = objective(B, pool[0], &mix)[0];
    guard_finite(l0, stage.name, 0);
    log_row(0, lr_of(1), l0);
  }

  Rng order = named_rng(seed, "train/anchors");
  AdamW opt(tc.weight_decay, tc.clip);
  double since_sum = 0.0;
  int64_t since_n = 0;
  for (int64_t u = 1; u <= stage.total; ++u) {
    const int64_t t0 = pool[static_cast<size_t>(
        order.uniform_int(static_cast<int64_t>(pool.size())))];
    Graph g;
    Binder B(g, store, /*trainable=*/true);
    B.set_trainable_filter(
        [](const std::string& nm) { return nm.rfind("global.", 0) != 0; });
    Rng mix = named_rng(seed, "train/mix/" + std::to_string(u));
    Tensor loss = objective(B, t0, &mix);
    guard_finite(loss[0], stage.name, u);
    g.backward(loss);
    opt.step(store, trainable_grads(B), lr_of(u));
    since_sum += loss[0];
    ++since_n;
    if (u % tc.val_every == 0 || u == stage.total) {
      log_row(u, lr_of(u), since_sum / static_cast<double>(since_n));
      since_sum = 0.0;
      since_n = 0;
      if (u == stage.total) break;
    }
  }
  return res;
}

}  // namespace detail

inline StageResult train_one_step(ParamStore& store, const TrainContext& ctx,
                                  uint64_t seed, std::ostream* csv = nullptr) {
  detail::RegionalStageSpec st;
  st.name = "one-step";
  st.total = ctx.cfg.train.steps;
  st.horizon = 1;
  st.cosine = true;
  st.global_term = false;
  return detail::run_regional_stage(store, ctx, seed, csv, st);
}

inline StageResult train_rollout_finetune(ParamStore& store,
                                          const TrainContext& ctx, uint64_t seed,
                                          std::ostream* csv = nullptr) {
  detail::RegionalStageSpec st;
  st.name = "rollout-ft";
  st.total = ctx.cfg.train.rollout_steps;
  st.horizon = ctx.cfg.train.horizon;
  st.cosine = false;
  st.global_term = true;
  return detail::run_regional_stage(store, ctx, seed, csv, st);
}

// ----- checkpoints ------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const RunConfig& cfg, const std::string& stage,
                            int64_t step, double loss) {
  std::vector<Grid1Record> recs;
  for (const auto& spec : store.specs())
    recs.push_back({spec.name, kGrid1F64, store.value(spec.name)});
  grid1_write(path, recs);

  std::ifstream in(path, std::ios::binary);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  std::ofstream man(path + ".manifest", std::ios::trunc);
  if (!man)
    throw PipelineError("checkpoint: cannot write manifest for " + path);
  man << "stage = " << stage << "\n";
  man << "step = " << step << "\n";
  man << "loss = " << fmt_f64(loss) << "\n";
  man << "config_hash = " << detail::hex64(config_hash(cfg)) << "\n";
  man << "params_hash = " << detail::hex64(fnv1a64(bytes.str())) << "\n";
  if (!man) throw PipelineError("checkpoint: manifest write failed for " + path);
}

inline void load_checkpoint(const std::string& path, ParamStore& store) {
  std::vector<Grid1Record> recs = grid1_read(path);
  std::unordered_map<std::string, const Grid1Record*> by_name;
  for (const Grid1Record& r : recs)
    if (!by_name.emplace(r.name, &r).second)
      throw PipelineError("checkpoint " + path + ": duplicate record " + r.name);
  if (recs.size() != store.specs().size())
    throw PipelineError("checkpoint " + path + " holds " +
                        std::to_string(recs.size()) +
                        " records, the model defines " +
                        std::to_string(store.specs().size()) + " parameters");
  for (const auto& spec : store.specs()) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end())
      throw PipelineError("checkpoint " + path + " is missing parameter " +
                          spec.name);
    store.set_value(spec.name, it->second->data);
  }
}

}  // namespace scalemix
