#pragma once
// Gradient verification harness: every differentiable operation (and a set of
// composite model-style blocks) is checked against central finite differences
// under a random linear projection of the output, across many seeds.
//
// Inputs for kinked operations (abs, clamp, bilinear interpolation) are drawn
// away from their non-differentiable sets so the finite-difference oracle is
// valid.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <algorithm>
#include <map>

#include "scalemix/autodiff.hpp"
#include "scalemix/common.hpp"
#include "scalemix/coupled.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

struct GradcheckOptions {
  int seeds = 20;
  double tol = 1e-4;
  bool include_model_sites = true;
  double eps = 1e-5;
};

struct GradcheckSite {
  std::string name;
  bool passed = true;
  double worst_rel_err = 0.0;
  uint64_t worst_seed = 0;
};

struct GradcheckReport {
  std::vector<GradcheckSite> sites;

  bool all_passed() const {
    for (const auto& s : sites)
      if (!s.passed) return false;
    return !sites.empty();
  }

  double worst_rel_err() const {
    double worst = 0.0;
    for (const auto& s : sites) worst = std::max(worst, s.worst_rel_err);
    return worst;
  }
};

namespace detail {

// One named differentiable function: shapes of its inputs, an optional
// per-input sampler, and a builder mapping graph inputs to an output tensor.
struct SiteSpec {
  std::string name;
  std::vector<Shape> input_shapes;
  std::function<Tensor(Graph&, const std::vector<Tensor>&)> build;
  std::function<Tensor(int, const Shape&, Rng&)> sample;  // null -> normal
};

inline Tensor sample_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

// Normal draws pushed at least `margin` away from every kink value.
inline Tensor sample_away_from(const Shape& shape, Rng& rng,
                               const std::vector<double>& kinks, double margin) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) {
    x = rng.normal();
    for (int guard = 0; guard < 64; ++guard) {
      bool clear = true;
      for (double k : kinks)
        if (std::abs(x - k) < margin) {
          x = k + (x >= k ? margin + margin : -(margin + margin));
          clear = false;
        }
      if (clear) break;
    }
  }
  return Tensor(shape, std::move(v));
}

// (y, x) coordinates inside an h x w grid, with fractional parts in
// [0.2, 0.8]: away from both the cell lattice and the clamping boundary.
inline Tensor sample_coords(int64_t m, int64_t h, int64_t w, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(m * 2));
  for (int64_t i = 0; i < m; ++i) {
    v[static_cast<size_t>(i * 2 + 0)] =
        static_cast<double>(rng.uniform_int(h - 1)) + 0.2 + 0.6 * rng.uniform();
    v[static_cast<size_t>(i * 2 + 1)] =
        static_cast<double>(rng.uniform_int(w - 1)) + 0.2 + 0.6 * rng.uniform();
  }
  return Tensor({m, 2}, std::move(v));
}

inline std::vector<SiteSpec> tensor_op_sites() {
  std::vector<SiteSpec> sites;
  auto add = [&](std::string name, std::vector<Shape> shapes,
                 std::function<Tensor(Graph&, const std::vector<Tensor>&)> build,
                 std::function<Tensor(int, const Shape&, Rng&)> sample = nullptr) {
    sites.push_back({std::move(name), std::move(shapes), std::move(build),
                     std::move(sample)});
  };

  add("add", {{3, 4}, {3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.add(in[0], in[1]); });
  add("sub", {{3, 4}, {3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.sub(in[0], in[1]); });
  add("mul", {{3, 4}, {3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.mul(in[0], in[1]); });
  add("scale", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.scale(in[0], 1.75); });
  add("add_rowvec", {{3, 4}, {4}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.add_rowvec(in[0], in[1]);
  });
  add("mul_rowvec", {{3, 4}, {4}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.mul_rowvec(in[0], in[1]);
  });
  add("scale_rows", {{4, 3}, {4}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.scale_rows(in[0], in[1]);
  });
  add("matmul", {{3, 4}, {4, 2}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.matmul(in[0], in[1]);
  });
  add("transpose", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.transpose(in[0]); });
  add("softmax_last", {{3, 5}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.softmax_last(in[0]);
  });
  add("layer_norm", {{3, 6}, {6}, {6}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.layer_norm(in[0], in[1], in[2], 1e-5);
      });
  add("gelu", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.gelu(in[0]); });
  add("sin", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.sin(in[0]); });
  add("cos", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.cos(in[0]); });
  add("abs", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.abs(in[0]); },
      [](int, const Shape& s, Rng& rng) {
        return sample_away_from(s, rng, {0.0}, 0.05);
      });
  add("clamp", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.clamp(in[0], -1.0, 1.0); },
      [](int, const Shape& s, Rng& rng) {
        return sample_away_from(s, rng, {-1.0, 1.0}, 0.05);
      });
  add("sum_all", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.sum_all(in[0]); });
  add("mean_all", {{3, 4}},
      [](Graph& g, const std::vector<Tensor>& in) { return g.mean_all(in[0]); });
  add("reshape", {{3, 4}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.reshape(in[0], {2, 6});
  });
  add("concat_last", {{3, 2}, {3, 4}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.concat_last(in[0], in[1]);
  });
  add("slice_last", {{3, 6}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.slice_last(in[0], 1, 4);
  });
  add("gather_rows", {{5, 3}}, [](Graph& g, const std::vector<Tensor>& in) {
    return g.gather_rows(in[0], {3, 0, 3});  // duplicate: grads must accumulate
  });
  add("scatter_replace_rows", {{5, 3}, {2, 3}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.scatter_replace_rows(in[0], {1, 4}, in[1]);
      });
  add("conv_patchify", {{4, 6, 2}, {2, 2, 2, 3}, {3}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.conv_patchify(in[0], in[1], in[2], 2);
      });
  add("deconv_unpatchify", {{6, 3}, {2, 2, 2, 3}, {2}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.deconv_unpatchify(in[0], in[1], in[2], 2, 3);
      });
  add("conv3x3_same", {{4, 5, 2}, {3, 3, 2, 3}, {3}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.conv3x3_same(in[0], in[1], in[2]);
      });
  add("conv3x3_wrap", {{4, 5, 2}, {3, 3, 2, 3}, {3}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.conv3x3_wrap(in[0], in[1], in[2]);
      });
  add("bilinear_sample", {{4, 5, 3}, {6, 2}},
      [](Graph& g, const std::vector<Tensor>& in) {
        return g.bilinear_sample(in[0], in[1]);
      },
      [](int which, const Shape& s, Rng& rng) {
        if (which == 1) return sample_coords(6, 4, 5, rng);
        return sample_normal(s, rng);
      });
  return sites;
}

// Composite blocks mirroring how the model wires the primitives together.
inline std::vector<SiteSpec> model_sites() {
  std::vector<SiteSpec> sites;

  sites.push_back(
      {"attention_head",
       {{4, 6}, {5, 6}, {5, 6}},
       [](Graph& g, const std::vector<Tensor>& in) {
         Tensor scores = g.scale(g.matmul(in[0], g.transpose(in[1])),
                                 1.0 / std::sqrt(6.0));
         return g.matmul(g.softmax_last(scores), in[2]);
       },
       nullptr});

  sites.push_back(
      {"adaln_modulation",
       {{3, 6}, {6}, {6}},
       [](Graph& g, const std::vector<Tensor>& in) {
         Tensor ones = g.constant(Tensor::full({6}, 1.0));
         Tensor gamma1p = g.add(in[1], ones);
         Tensor normed = g.layer_norm(
             in[0], g.constant(Tensor::full({6}, 1.0)),
             g.constant(Tensor::zeros({6})), 1e-5);
         return g.add_rowvec(g.mul_rowvec(normed, gamma1p), in[2]);
       },
       nullptr});

  sites.push_back(
      {"top_m_gate",
       {{8}, {8, 4}},
       [](Graph& g, const std::vector<Tensor>& in) {
         // Probability-weighted gather: gradient flows through both the kept
         // probabilities and the kept rows, never through index selection.
         Tensor pr = g.softmax_last(in[0]);
         std::vector<int64_t> keep = {1, 4, 6};
         Tensor pr_rows = g.reshape(pr, {8, 1});
         Tensor kept_pr = g.gather_rows(pr_rows, keep);
         Tensor kept_rows = g.gather_rows(in[1], keep);
         return g.scale_rows(kept_rows, g.reshape(kept_pr, {3}));
       },
       nullptr});

  sites.push_back(
      {"ffn_block",
       {{3, 4}, {4, 8}, {8}, {8, 4}, {4}},
       [](Graph& g, const std::vector<Tensor>& in) {
         Tensor h = g.gelu(g.add_rowvec(g.matmul(in[0], in[1]), in[2]));
         return g.add(in[0], g.add_rowvec(g.matmul(h, in[3]), in[4]));
       },
       nullptr});

  sites.push_back(
      {"patch_roundtrip",
       {{4, 6, 2}, {2, 2, 2, 5}, {2, 2, 2, 5}},
       [](Graph& g, const std::vector<Tensor>& in) {
         Tensor tokens = g.conv_patchify(in[0], in[1],
                                         g.constant(Tensor::zeros({5})), 2);
         return g.deconv_unpatchify(g.gelu(tokens), in[2],
                                    g.constant(Tensor::zeros({2})), 2, 3);
       },
       nullptr});

  sites.push_back(
      {"scatter_update_block",
       {{6, 4}, {2, 4}},
       [](Graph& g, const std::vector<Tensor>& in) {
         Tensor upd = g.gelu(in[1]);
         Tensor merged = g.scatter_replace_rows(in[0], {0, 3}, upd);
         return g.matmul(merged, g.transpose(merged));
       },
       nullptr});

  return sites;
}

inline double check_site(const SiteSpec& site, uint64_t seed, double eps,
                         double& worst) {
  Rng rng = named_rng(seed, "gradcheck/" + site.name);
  const int n_in = static_cast<int>(site.input_shapes.size());
  std::vector<Tensor> vals;
  vals.reserve(static_cast<size_t>(n_in));
  for (int i = 0; i < n_in; ++i)
    vals.push_back(site.sample ? site.sample(i, site.input_shapes[static_cast<size_t>(i)], rng)
                               : sample_normal(site.input_shapes[static_cast<size_t>(i)], rng));

  // Analytic pass.
  Graph g;
  std::vector<Tensor> ins;
  ins.reserve(vals.size());
  for (const auto& v : vals) ins.push_back(g.param(v));
  Tensor out = site.build(g, ins);
  Tensor proj = sample_normal(out.shape(), rng);
  Tensor loss = g.sum_all(g.mul(out, g.constant(proj)));
  g.backward(loss);

  for (int which = 0; which < n_in; ++which) {
    Tensor analytic = g.grad_or_zero(ins[static_cast<size_t>(which)]);
    auto scalar_fn = [&](const Tensor& x) {
      Graph h;
      std::vector<Tensor> hins;
      hins.reserve(vals.size());
      for (int j = 0; j < n_in; ++j)
        hins.push_back(h.constant(j == which ? x : vals[static_cast<size_t>(j)]));
      Tensor hout = site.build(h, hins);
      return h.sum_all(h.mul(hout, h.constant(proj)))[0];
    };
    Tensor fd = finite_diff_grad(scalar_fn, vals[static_cast<size_t>(which)], eps);
    for (int64_t i = 0; i < analytic.numel(); ++i) {
      const double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), 1.0});
      worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
    }
  }
  return worst;
}

}  // namespace detail

inline GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  if (opts.seeds <= 0) throw ContractError("gradcheck: seeds must be positive");
  std::vector<detail::SiteSpec> specs = detail::tensor_op_sites();
  if (opts.include_model_sites) {
    auto extra = detail::model_sites();
    specs.insert(specs.end(), extra.begin(), extra.end());
  }
  GradcheckReport report;
  report.sites.reserve(specs.size());
  for (const auto& spec : specs) {
    GradcheckSite site;
    site.name = spec.name;
    for (uint64_t seed = 0; seed < static_cast<uint64_t>(opts.seeds); ++seed) {
      double before = site.worst_rel_err;
      detail::check_site(spec, seed, opts.eps, site.worst_rel_err);
      if (site.worst_rel_err > before) site.worst_seed = seed;
    }
    site.passed = site.worst_rel_err <= opts.tol;
    report.sites.push_back(std::move(site));
  }
  return report;
}

// ----- end-to-end check on a toy coupled model --------------------------------------
// Finite differences over sampled entries of every parameter tensor against
// the analytic gradient of one fully wired forward step (and a 2-step
// rollout), reported per parameter group so every attention, conditioning,
// and mixer site shows up by name.

namespace detail {

// Geometry small enough that one forward runs in about a millisecond; the
// residual projections are generically initialized so gradients reach every
// branch.
inline ModelConfig toy_model_config() {
  ModelConfig mc;
  mc.H = 20;
  mc.W = 40;
  mc.V_A = 1;
  mc.P_levels = 1;
  mc.V_S = 2;
  mc.P = 4;
  mc.d = 8;
  mc.M = 2;
  mc.k = 2;
  mc.heads = 2;
  mc.m = 4;
  mc.region_h = 40;
  mc.region_w = 60;
  mc.p = 20;
  mc.V_reg = 3;
  mc.fine_scale = 5;
  mc.region_off_y = 20;
  mc.region_off_x = 40;
  mc.d_pi = 4;
  mc.d_f = 4;
  mc.ffn_mult = 2;
  mc.zero_residual_init = false;
  return mc;
}

// "global.enc0.attn.q.w" -> "global.enc0.attn"; "regional.pos" -> itself.
inline std::string param_group(const std::string& name) {
  std::vector<size_t> dots;
  for (size_t i = 0; i < name.size(); ++i)
    if (name[i] == '.') dots.push_back(i);
  const size_t n = dots.size() + 1;
  if (n <= 2) return name;
  const size_t keep = std::max<size_t>(2, n - 2);
  return name.substr(0, dots[keep - 1]);
}

struct ToyProblem {
  ModelConfig mc;
  RegionGeom geom;
  Tensor field;
  RegionalState state;
  Tensor proj_global;                // fixed random readout weights
  std::vector<Tensor> proj_regional;
};

inline ToyProblem make_toy_problem(uint64_t seed) {
  ToyProblem tp;
  tp.mc = toy_model_config();
  tp.geom = RegionGeom::from_config(tp.mc);
  Rng rng = named_rng(seed, "gradcheck/model_inputs");
  tp.field = sample_normal({tp.mc.H, tp.mc.W, tp.mc.channels()}, rng);
  for (int f = 0; f < 6; ++f)
    tp.state.history.push_back(
        sample_normal({tp.mc.region_h, tp.mc.region_w, tp.mc.V_reg}, rng));
  tp.state.topography = sample_normal({tp.mc.region_h, tp.mc.region_w, 1}, rng);
  tp.state.land_sea_mask = sample_normal({tp.mc.region_h, tp.mc.region_w, 1}, rng);
  tp.state.hour_of_day = 6.0;
  tp.state.day_of_year = 100.0;
  tp.proj_global = sample_normal({tp.mc.H, tp.mc.W, tp.mc.pred_channels()}, rng);
  for (int dt = 0; dt < 6; ++dt)
    tp.proj_regional.push_back(
        sample_normal({tp.mc.region_h, tp.mc.region_w, tp.mc.V_reg}, rng));
  return tp;
}

// Random linear readout of everything the model emits; smooth in the
// parameters as long as the top-m selection does not flip.
inline Tensor toy_loss(Graph& g, const ToyProblem& tp, Binder& B,
                       int64_t rollout_steps) {
  Tensor loss;
  auto fold = [&](const Tensor& out, const Tensor& proj) {
    Tensor term = g.mean_all(g.mul(out, g.constant(proj)));
    loss = loss.valid() ? g.add(loss, term) : term;
  };
  if (rollout_steps <= 1) {
    ForecastBundle fb = forward_step(B, tp.mc, tp.geom, tp.field, tp.state);
    fold(fb.global, tp.proj_global);
    for (int dt = 0; dt < 6; ++dt) fold(fb.regional[dt], tp.proj_regional[dt]);
  } else {
    auto steps = rollout(B, tp.mc, tp.geom, tp.field, tp.state, rollout_steps);
    for (const auto& fb : steps) {
      fold(fb.global, tp.proj_global);
      for (int dt = 0; dt < 6; ++dt) fold(fb.regional[dt], tp.proj_regional[dt]);
    }
  }
  return loss;
}

inline double toy_loss_value(const ToyProblem& tp, const ParamStore& store,
                             int64_t rollout_steps) {
  Graph g;
  Binder B(g, store, /*trainable=*/false);
  return toy_loss(g, tp, B, rollout_steps)[0];
}

}  // namespace detail

// Central finite differences on `entries_per_param` sampled entries of every
// parameter tensor against the analytic gradient of the toy model's readout
// loss, grouped per module. `rollout_steps` > 1 additionally exercises the
// autoregressive splice path.
inline std::vector<GradcheckSite> run_model_gradcheck(
    uint64_t seed, double tol, double eps = 1e-5, int entries_per_param = 2,
    int64_t rollout_steps = 1) {
  detail::ToyProblem tp = detail::make_toy_problem(seed);
  ParamStore store = build_model(tp.mc, seed);

  Graph g;
  Binder B(g, store, /*trainable=*/true);
  Tensor L = detail::toy_loss(g, tp, B, rollout_steps);
  g.backward(L);

  std::map<std::string, GradcheckSite> by_group;
  Rng pick = named_rng(seed, "gradcheck/model_entries");
  const std::string tag =
      rollout_steps <= 1 ? "model/" : "rollout" + std::to_string(rollout_steps) + "/";
  for (const auto& [name, bound] : B.bound()) {
    Tensor analytic = g.grad_or_zero(bound);
    const Tensor& value = store.value(name);
    GradcheckSite& site = by_group[tag + detail::param_group(name)];
    for (int e = 0; e < entries_per_param; ++e) {
      const int64_t i = pick.uniform_int(value.numel());
      std::vector<double> plus(value.data()), minus(value.data());
      plus[static_cast<size_t>(i)] += eps;
      minus[static_cast<size_t>(i)] -= eps;
      ParamStore probe = store;
      probe.set_value(name, Tensor(value.shape(), std::move(plus)));
      const double fp = detail::toy_loss_value(tp, probe, rollout_steps);
      probe.set_value(name, Tensor(value.shape(), std::move(minus)));
      const double fm = detail::toy_loss_value(tp, probe, rollout_steps);
      const double fd = (fp - fm) / (2.0 * eps);
      const double ga = analytic[i];
      const double denom = std::max({std::abs(ga), std::abs(fd), 1.0});
      const double rel = std::abs(ga - fd) / denom;
      if (rel > site.worst_rel_err) {
        site.worst_rel_err = rel;
        site.worst_seed = seed;
      }
    }
  }

  std::vector<GradcheckSite> sites;
  for (auto& [group, site] : by_group) {
    site.name = group;
    site.passed = site.worst_rel_err <= tol;
    sites.push_back(std::move(site));
  }
  return sites;
}

}  // namespace scalemix
