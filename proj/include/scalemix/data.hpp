#pragma once
// Synthetic multiscale scenario. Every channel is an analytic function of
// (cell, hour): smooth periodic tracers advected semi-Lagrangianly by a slowly
// rotating wind whose local speed is amplified on terrain ridges and damped in
// valleys, plus a fixed terrain imprint and optional seeded smooth noise. The
// coarse grid holds exact 5x5 block-averages of the fine wind and statics,
// plus independent large-scale upper-air modes that drift only when the wind
// blows. Everything is deterministic given (config, seed).

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "scalemix/config.hpp"
#include "scalemix/grid.hpp"
#include "scalemix/scalemixer.hpp"

namespace scalemix {

struct SyntheticDataset {
  std::vector<Tensor> regional;  // hourly [h, w, V_reg], t = 0..n_timesteps-1
  std::vector<Tensor> global;    // 6-hourly [H, W, C], index g is hour 6g
  Tensor topography;             // [h, w, 1] region crop
  Tensor land_sea_mask;          // [h, w, 1]
};

namespace detail {

struct Mode {
  double ky, kx, amp, phase, speed;
};

inline std::vector<Mode> draw_modes(uint64_t seed, const std::string& stream,
                                    int64_t count, int64_t max_wave,
                                    double amp_lo, double amp_hi) {
  Rng rng = named_rng(seed, stream);
  std::vector<Mode> modes;
  for (int64_t q = 0; q < count; ++q) {
    Mode m;
    m.ky = 1.0 + std::floor(rng.uniform() * static_cast<double>(max_wave));
    m.kx = 1.0 + std::floor(rng.uniform() * static_cast<double>(max_wave));
    m.amp = rng.uniform(amp_lo, amp_hi);
    m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    m.speed = rng.uniform(0.5, 1.5);
    modes.push_back(m);
  }
  return modes;
}

// Doubly periodic smooth field over fractional coordinates, with an optional
// phase drift (phase_rate * speed_q per hour).
inline double eval_modes(const std::vector<Mode>& modes, double fy, double fx,
                         double phase_rate = 0.0, double t = 0.0) {
  const double two_pi = 2.0 * std::numbers::pi;
  double acc = 0.0;
  for (const Mode& m : modes)
    acc += m.amp * std::sin(two_pi * (m.ky * fy + m.kx * fx) + m.phase +
                            phase_rate * m.speed * t);
  return acc;
}

// The steering field translates rigidly eastward: every mode shares one
// zonal drift (globe fractions per hour), so the whole pattern moves as a
// unit instead of each mode oscillating in place.
inline double eval_steering(const std::vector<Mode>& modes, double fy, double fx,
                            double drift, double t) {
  const double two_pi = 2.0 * std::numbers::pi;
  double acc = 0.0;
  for (const Mode& m : modes)
    acc += m.amp *
           std::sin(two_pi * (m.ky * fy + m.kx * (fx - drift * t)) + m.phase);
  return acc;
}

}  // namespace detail

inline Tensor fine_topography(const RunConfig& cfg, uint64_t seed) {
  const ModelConfig& mc = cfg.model;
  const int64_t hf = mc.H * mc.fine_scale, wf = mc.W * mc.fine_scale;
  std::vector<detail::Mode> modes = detail::draw_modes(
      seed, "data/terrain", 3, cfg.data.terrain_waves, 0.5, 1.0);
  std::vector<double> v(static_cast<size_t>(hf * wf));
  for (int64_t y = 0; y < hf; ++y)
    for (int64_t x = 0; x < wf; ++x)
      v[static_cast<size_t>(y * wf + x)] =
          cfg.data.terrain_amp *
          detail::eval_modes(modes, static_cast<double>(y) / hf,
                             static_cast<double>(x) / wf);
  return Tensor({hf, wf, 1}, std::move(v));
}

inline Tensor fine_land_sea_mask(const RunConfig& cfg, uint64_t seed) {
  const ModelConfig& mc = cfg.model;
  const int64_t hf = mc.H * mc.fine_scale, wf = mc.W * mc.fine_scale;
  std::vector<detail::Mode> modes =
      detail::draw_modes(seed, "data/mask", 3, 2, 0.5, 1.0);
  std::vector<double> v(static_cast<size_t>(hf * wf));
  for (int64_t y = 0; y < hf; ++y)
    for (int64_t x = 0; x < wf; ++x)
      v[static_cast<size_t>(y * wf + x)] =
          0.5 + 0.5 * std::tanh(3.0 * detail::eval_modes(
                                          modes, static_cast<double>(y) / hf,
                                          static_cast<double>(x) / wf));
  return Tensor({hf, wf, 1}, std::move(v));
}

// How strongly the drifting large-scale mode field (the one shown in coarse
// upper-air channel 0) modulates the fine wind speed. This is the causal
// coarse-to-fine channel: the mode pattern itself never appears in the fine
// channels, but its current phase — legible only from the coarse input —
// scales the advection that moves every fine tracer.
constexpr double kUpperWindCoupling = 0.7;

// Zonal drift of the steering pattern, in globe fractions per hour per unit
// base wind speed. At desk defaults the pattern crosses the regional window
// in roughly six hours, so most of the steering values that act during a
// 6-hour forecast sit west of the window — outside it — at analysis time.
constexpr double kUpperDriftPerWind = 0.039;

// One hourly fine frame [hf, wf, V_reg]. Channels: U, V wind components, then
// V_reg - 2 advected tracers (T, Q, P, TCC, SSRD at desk scale — SSRD is a
// plain tracer: no diurnal source, so zero wind and zero noise freeze it).
inline Tensor fine_frame(const RunConfig& cfg, uint64_t seed, int64_t t) {
  const ModelConfig& mc = cfg.model;
  const DataConfig& dc = cfg.data;
  const int64_t hf = mc.H * mc.fine_scale, wf = mc.W * mc.fine_scale;
  const double two_pi = 2.0 * std::numbers::pi;

  std::vector<detail::Mode> terrain = detail::draw_modes(
      seed, "data/terrain", 3, dc.terrain_waves, 0.5, 1.0);
  std::vector<detail::Mode> upper =
      detail::draw_modes(seed, "data/upper0_0", 3, 2, 0.5, 1.0);
  const double upper_drift = kUpperDriftPerWind * dc.wind_speed;
  std::vector<std::vector<detail::Mode>> tracers;
  for (int64_t c = 2; c < mc.V_reg; ++c)
    tracers.push_back(detail::draw_modes(
        seed, "data/tracer" + std::to_string(c), 4, 3, 0.3, 1.0));
  std::vector<std::vector<detail::Mode>> noise;
  if (dc.noise_scale != 0.0)
    for (int64_t c = 0; c < mc.V_reg; ++c)
      noise.push_back(detail::draw_modes(
          seed, "data/noise" + std::to_string(c) + "_" + std::to_string(t), 2,
          4, 0.5, 1.0));

  // Rotating wind direction and its exact time integral (displacement of an
  // unmodulated parcel since t = 0, in fine cells).
  const double theta = two_pi * static_cast<double>(t) / dc.rotation_hours;
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double radius = dc.wind_speed * dc.rotation_hours / two_pi;
  const double disp_x = radius * std::sin(theta);
  const double disp_y = radius * (1.0 - std::cos(theta));

  std::vector<double> v(static_cast<size_t>(hf * wf * mc.V_reg));
  for (int64_t y = 0; y < hf; ++y)
    for (int64_t x = 0; x < wf; ++x) {
      const double fy = static_cast<double>(y) / hf;
      const double fx = static_cast<double>(x) / wf;
      const double ridge =
          std::tanh(dc.terrain_amp * detail::eval_modes(terrain, fy, fx));
      const double q =
          detail::eval_steering(upper, fy, fx, upper_drift,
                                static_cast<double>(t)) / 3.0;  // |q| <= 1
      // Terrain shapes the wind the surface channels report; the drifting
      // upper-level mode additionally steers the advection itself, so its
      // state is readable from the coarse grid but never from any single
      // fine frame's values.
      const double terr = 1.0 + dc.kappa * ridge;
      const double local = terr * (1.0 + kUpperWindCoupling * q);
      double* cell = v.data() + (y * wf + x) * mc.V_reg;
      cell[0] = dc.wind_speed * ux * terr;
      cell[1] = dc.wind_speed * uy * terr;
      const double sy = fy - local * disp_y / static_cast<double>(hf);
      const double sx = fx - local * disp_x / static_cast<double>(wf);
      for (int64_t c = 2; c < mc.V_reg; ++c)
        cell[c] = detail::eval_modes(tracers[static_cast<size_t>(c - 2)], sy, sx) +
                  0.3 * ridge;
      if (!noise.empty())
        for (int64_t c = 0; c < mc.V_reg; ++c)
          cell[c] += dc.noise_scale *
                     detail::eval_modes(noise[static_cast<size_t>(c)], fy, fx);
    }
  return Tensor({hf, wf, mc.V_reg}, std::move(v));
}

namespace detail {

inline Tensor block_average(const Tensor& fine, int64_t channel, int64_t H,
                            int64_t W) {
  std::vector<double> v(static_cast<size_t>(H * W));
  const int64_t C = fine.dim(2);
  for (int64_t I = 0; I < H; ++I)
    for (int64_t J = 0; J < W; ++J) {
      double acc = 0.0;
      for (int64_t di = 0; di < 5; ++di)
        for (int64_t dj = 0; dj < 5; ++dj)
          acc += fine[((5 * I + di) * fine.dim(1) + 5 * J + dj) * C + channel];
      v[static_cast<size_t>(I * W + J)] = acc / 25.0;
    }
  return Tensor({H, W, 1}, std::move(v));
}

inline Tensor crop_region(const Tensor& fine, const ModelConfig& mc) {
  const int64_t C = fine.dim(2);
  std::vector<double> v(static_cast<size_t>(mc.region_h * mc.region_w * C));
  for (int64_t i = 0; i < mc.region_h; ++i)
    for (int64_t j = 0; j < mc.region_w; ++j)
      for (int64_t c = 0; c < C; ++c)
        v[static_cast<size_t>((i * mc.region_w + j) * C + c)] =
            fine.at({mc.region_off_y + i, mc.region_off_x + j, c});
  return Tensor({mc.region_h, mc.region_w, C}, std::move(v));
}

}  // namespace detail

// Coarse frame [H, W, C] at hour t. Channel order matches the model: V_A
// upper-air variables x P_levels levels (large-scale analytic modes, drifting
// only when the wind blows), then V_S surface channels (exact block-averages
// of the first V_S fine channels), then block-averaged topography and mask.
inline Tensor global_frame(const RunConfig& cfg, uint64_t seed, int64_t t,
                           const Tensor& fine, const Tensor& fine_topo,
                           const Tensor& fine_mask) {
  const ModelConfig& mc = cfg.model;
  const double two_pi = 2.0 * std::numbers::pi;
  const double phase_rate =
      two_pi * cfg.data.wind_speed / cfg.data.rotation_hours;
  std::vector<double> v(
      static_cast<size_t>(mc.H * mc.W * mc.channels()));
  const double upper_drift = kUpperDriftPerWind * cfg.data.wind_speed;
  for (int64_t k = 0; k < mc.V_A; ++k)
    for (int64_t p = 0; p < mc.P_levels; ++p) {
      std::vector<detail::Mode> modes = detail::draw_modes(
          seed, "data/upper" + std::to_string(k) + "_" + std::to_string(p), 3,
          2, 0.5, 1.0);
      const int64_t ch = k * mc.P_levels + p;
      const bool steering = (k == 0 && p == 0);
      for (int64_t I = 0; I < mc.H; ++I)
        for (int64_t J = 0; J < mc.W; ++J) {
          const double fy = static_cast<double>(I) / mc.H;
          const double fx = static_cast<double>(J) / mc.W;
          v[static_cast<size_t>((I * mc.W + J) * mc.channels() + ch)] =
              steering
                  ? detail::eval_steering(modes, fy, fx, upper_drift,
                                          static_cast<double>(t))
                  : detail::eval_modes(modes, fy, fx, phase_rate,
                                       static_cast<double>(t));
        }
    }
  const int64_t surf0 = mc.V_A * mc.P_levels;
  for (int64_t k = 0; k < mc.V_S; ++k) {
    Tensor avg = detail::block_average(fine, k, mc.H, mc.W);
    for (int64_t I = 0; I < mc.H; ++I)
      for (int64_t J = 0; J < mc.W; ++J)
        v[static_cast<size_t>((I * mc.W + J) * mc.channels() + surf0 + k)] =
            avg.at({I, J, 0});
  }
  Tensor tavg = detail::block_average(fine_topo, 0, mc.H, mc.W);
  Tensor mavg = detail::block_average(fine_mask, 0, mc.H, mc.W);
  for (int64_t I = 0; I < mc.H; ++I)
    for (int64_t J = 0; J < mc.W; ++J) {
      v[static_cast<size_t>((I * mc.W + J) * mc.channels() + surf0 + mc.V_S)] =
          tavg.at({I, J, 0});
      v[static_cast<size_t>((I * mc.W + J) * mc.channels() + surf0 + mc.V_S +
                            1)] = mavg.at({I, J, 0});
    }
  return Tensor({mc.H, mc.W, mc.channels()}, std::move(v));
}

inline SyntheticDataset generate_synthetic(const RunConfig& cfg, uint64_t seed) {
  validate(cfg);
  const ModelConfig& mc = cfg.model;
  SyntheticDataset ds;
  Tensor ftopo = fine_topography(cfg, seed);
  Tensor fmask = fine_land_sea_mask(cfg, seed);
  ds.topography = detail::crop_region(ftopo, mc);
  ds.land_sea_mask = detail::crop_region(fmask, mc);
  for (int64_t t = 0; t < cfg.data.n_timesteps; ++t) {
    Tensor fine = fine_frame(cfg, seed, t);
    ds.regional.push_back(detail::crop_region(fine, mc));
    if (t % 6 == 0)
      ds.global.push_back(global_frame(cfg, seed, t, fine, ftopo, fmask));
  }
  return ds;
}

// ----- z-score normalization ----------------------------------------------------------

struct ZStats {
  std::vector<double> mu, sigma;  // per channel (last dimension)
};

inline ZStats compute_zstats(const std::vector<Tensor>& frames) {
  if (frames.empty()) throw ContractError("zstats: no frames");
  const int64_t C = frames[0].dim(frames[0].ndim() - 1);
  std::vector<double> sum(static_cast<size_t>(C), 0.0);
  std::vector<double> sumsq(static_cast<size_t>(C), 0.0);
  int64_t cells = 0;
  for (const Tensor& f : frames) {
    if (f.dim(f.ndim() - 1) != C)
      throw ShapeError("zstats: frames disagree on channel count");
    const int64_t n = f.numel() / C;
    cells += n;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < C; ++c) {
        const double x = f[i * C + c];
        sum[static_cast<size_t>(c)] += x;
        sumsq[static_cast<size_t>(c)] += x * x;
      }
  }
  ZStats st;
  for (int64_t c = 0; c < C; ++c) {
    const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(cells);
    const double var =
        std::max(0.0, sumsq[static_cast<size_t>(c)] / static_cast<double>(cells) -
                          mu * mu);
    st.mu.push_back(mu);
    st.sigma.push_back(std::max(std::sqrt(var), 1e-6));
  }
  return st;
}

inline Tensor zscore(const Tensor& x, const ZStats& st) {
  const int64_t C = x.dim(x.ndim() - 1);
  if (C != static_cast<int64_t>(st.mu.size()))
    throw ShapeError("zscore: stats cover " + std::to_string(st.mu.size()) +
                     " channels, field has " + std::to_string(C));
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel() / C; ++i)
    for (int64_t c = 0; c < C; ++c)
      v[static_cast<size_t>(i * C + c)] =
          (x[i * C + c] - st.mu[static_cast<size_t>(c)]) /
          st.sigma[static_cast<size_t>(c)];
  return Tensor(x.shape(), std::move(v));
}

inline Tensor zscore_inverse(const Tensor& x, const ZStats& st) {
  const int64_t C = x.dim(x.ndim() - 1);
  if (C != static_cast<int64_t>(st.mu.size()))
    throw ShapeError("zscore inverse: stats cover " +
                     std::to_string(st.mu.size()) + " channels, field has " +
                     std::to_string(C));
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel() / C; ++i)
    for (int64_t c = 0; c < C; ++c)
      v[static_cast<size_t>(i * C + c)] =
          x[i * C + c] * st.sigma[static_cast<size_t>(c)] +
          st.mu[static_cast<size_t>(c)];
  return Tensor(x.shape(), std::move(v));
}

// ----- sample anchors and splits ------------------------------------------------------

// A training anchor t0 is a 6-hourly analysis time with a full 6-hour history
// behind it and a 6-hour target ahead of it.
inline std::vector<int64_t> anchor_times(const RunConfig& cfg) {
  std::vector<int64_t> anchors;
  for (int64_t t0 = 6; t0 + 6 <= cfg.data.n_timesteps - 1; t0 += 6)
    anchors.push_back(t0);
  if (anchors.empty())
    throw ConfigError("data: n_timesteps = " +
                      std::to_string(cfg.data.n_timesteps) +
                      " leaves no usable training sample");
  return anchors;
}

struct Splits {
  std::vector<int64_t> train, val, test;  // anchor hours, chronological
};

inline Splits chronological_splits(const RunConfig& cfg) {
  std::vector<int64_t> a = anchor_times(cfg);
  const size_t n = a.size();
  const size_t ntr = n * 70 / 100, nva = n * 15 / 100;
  Splits sp;
  sp.train.assign(a.begin(), a.begin() + static_cast<int64_t>(ntr));
  sp.val.assign(a.begin() + static_cast<int64_t>(ntr),
                a.begin() + static_cast<int64_t>(ntr + nva));
  sp.test.assign(a.begin() + static_cast<int64_t>(ntr + nva), a.end());
  return sp;
}

inline RegionalState state_at(const SyntheticDataset& ds, int64_t t0) {
  if (t0 < 5 || t0 >= static_cast<int64_t>(ds.regional.size()))
    throw ContractError("state_at: hour " + std::to_string(t0) +
                        " lacks a six-hour history");
  RegionalState st;
  for (int64_t t = t0 - 5; t <= t0; ++t)
    st.history.push_back(ds.regional[static_cast<size_t>(t)]);
  st.topography = ds.topography;
  st.land_sea_mask = ds.land_sea_mask;
  st.hour_of_day = static_cast<double>(t0 % 24);
  st.day_of_year = static_cast<double>((t0 / 24) % 365);
  return st;
}

}  // namespace scalemix
