#pragma once
// Decoupled-weight-decay adaptive-moment optimizer with global gradient-norm
// clipping, and the warmup + cosine learning-rate schedule shared by the
// training stages.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "scalemix/common.hpp"
#include "scalemix/params.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

// Linear warmup to lr over `warmup` steps, then cosine decay landing exactly
// on min_lr at the final step. warmup = 0 with min_lr = lr gives a constant
// schedule; runs too short for the cosine span plateau at lr.
inline double lr_at(double lr, double min_lr, int64_t warmup, int64_t step,
                    int64_t total) {
  if (step < warmup)
    return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const int64_t span = total - 1 - warmup;
  if (span <= 0) return lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(span);
  return min_lr +
         0.5 * (lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// θ ← θ − lr (m̂/(√v̂ + ε) + wd θ), with gradients first rescaled so their
// global norm does not exceed `clip`. Decay is decoupled: it acts on every
// parameter passed to step(), gradient or not, and never enters the moments.
class AdamW {
 public:
  AdamW(double weight_decay, double clip)
      : weight_decay_(weight_decay), clip_(clip) {}

  void step(ParamStore& store,
            const std::vector<std::pair<std::string, Tensor>>& grads,
            double lr) {
    ++t_;
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
      if (g.shape() != store.value(name).shape())
        throw ShapeError("optimizer: gradient for " + name + " has shape " +
                         shape_str(g.shape()) + ", parameter has " +
                         shape_str(store.value(name).shape()));
      for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
      throw DivergenceError("optimizer: gradient norm is not finite");
    const double scale = norm > clip_ ? clip_ / norm : 1.0;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));

    for (const auto& [name, g] : grads) {
      const Tensor& theta = store.value(name);
      Moments& mo = moments_[name];
      if (mo.m.empty()) {
        mo.m.assign(static_cast<size_t>(g.numel()), 0.0);
        mo.v.assign(static_cast<size_t>(g.numel()), 0.0);
      }
      std::vector<double> next(static_cast<size_t>(g.numel()));
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double gi = scale == 1.0 ? g[i] : g[i] * scale;
        double& m = mo.m[static_cast<size_t>(i)];
        double& v = mo.v[static_cast<size_t>(i)];
        m = kBeta1 * m + (1.0 - kBeta1) * gi;
        v = kBeta2 * v + (1.0 - kBeta2) * gi * gi;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        next[static_cast<size_t>(i)] =
            theta[i] - lr * (mhat / (std::sqrt(vhat) + kEps) +
                             weight_decay_ * theta[i]);
      }
      store.set_value(name, Tensor(theta.shape(), std::move(next)));
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  struct Moments {
    std::vector<double> m, v;
  };

  double weight_decay_;
  double clip_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace scalemix
