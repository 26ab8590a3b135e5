#pragma once
// Named parameter registry. Every parameter is initialized from its own RNG
// stream keyed by (seed, name), so a given named tensor is bit-identical
// across model variants that share the name — independent of what else is
// defined or in which order.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "scalemix/autodiff.hpp"
#include "scalemix/common.hpp"
#include "scalemix/tensor.hpp"

namespace scalemix {

enum class Init {
  kZero,
  kOne,
  kNormal,      // N(0, 1)
  kNormal002,   // N(0, 0.02^2), position-embedding style
  kFanIn,       // N(0, 1/fan_in)
  kMeanFusion,  // [k*out, out] block-diagonal averaging: W[f*out+j, j] = 1/k
};

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kFanIn;
  int64_t fan_in = 0;
};

inline Tensor init_param(const ParamSpec& spec, uint64_t seed) {
  const int64_t n = shape_numel(spec.shape);
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  Rng rng = named_rng(seed, "param/" + spec.name);
  switch (spec.init) {
    case Init::kZero:
      break;
    case Init::kOne:
      for (auto& x : v) x = 1.0;
      break;
    case Init::kNormal:
      for (auto& x : v) x = rng.normal();
      break;
    case Init::kNormal002:
      for (auto& x : v) x = 0.02 * rng.normal();
      break;
    case Init::kFanIn: {
      if (spec.fan_in <= 0)
        throw ConfigError("init: fan_in not set for parameter " + spec.name);
      const double std = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (auto& x : v) x = std * rng.normal();
      break;
    }
    case Init::kMeanFusion: {
      if (spec.shape.size() != 2 || spec.shape[0] % spec.shape[1] != 0)
        throw ConfigError("init: mean-fusion parameter " + spec.name +
                          " must be [k*out, out]");
      const int64_t out = spec.shape[1];
      const int64_t blocks = spec.shape[0] / out;
      for (int64_t f = 0; f < blocks; ++f)
        for (int64_t j = 0; j < out; ++j)
          v[static_cast<size_t>((f * out + j) * out + j)] =
              1.0 / static_cast<double>(blocks);
      break;
    }
  }
  return Tensor(spec.shape, std::move(v));
}

class ParamStore {
 public:
  void define(ParamSpec spec) {
    if (index_.count(spec.name))
      throw ConfigError("parameter defined twice: " + spec.name);
    if (shape_numel(spec.shape) <= 0)
      throw ShapeError("parameter with empty shape: " + spec.name);
    index_.emplace(spec.name, specs_.size());
    specs_.push_back(std::move(spec));
    values_.push_back(Tensor());
  }

  void define_all(const std::vector<ParamSpec>& specs) {
    for (const auto& s : specs) define(s);
  }

  void init_all(uint64_t seed) {
    for (size_t i = 0; i < specs_.size(); ++i)
      values_[i] = init_param(specs_[i], seed);
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& value(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    const Tensor& v = values_[it->second];
    if (!v.valid()) throw ConfigError("parameter not initialized: " + name);
    return v;
  }

  void set_value(const std::string& name, Tensor t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    if (t.shape() != specs_[it->second].shape)
      throw ShapeError("parameter " + name + " expects shape " +
                       shape_str(specs_[it->second].shape) + ", got " +
                       shape_str(t.shape()));
    values_[it->second] = std::move(t);
  }

  const std::vector<ParamSpec>& specs() const { return specs_; }

  int64_t count() const {
    int64_t total = 0;
    for (const auto& s : specs_) total += shape_numel(s.shape);
    return total;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, size_t> index_;
};

// Binds store parameters into a graph, as trainable params or as frozen
// constants. Each name binds to exactly one node, so reuse of a weight
// accumulates gradients correctly.
class Binder {
 public:
  Binder(Graph& g, const ParamStore& store, bool trainable)
      : g_(g), store_(store), trainable_(trainable) {}

  // Restricts training to names the filter accepts; everything else binds as
  // a frozen constant. Must be set before the first bind of an affected name.
  void set_trainable_filter(std::function<bool(const std::string&)> f) {
    trainable_filter_ = std::move(f);
  }

  Tensor operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const Tensor& v = store_.value(name);
    const bool tr =
        trainable_ && (!trainable_filter_ || trainable_filter_(name));
    Tensor bound = tr ? g_.param(v) : g_.constant(v);
    cache_.emplace(name, bound);
    order_.emplace_back(name, bound);
    return bound;
  }

  const std::vector<std::pair<std::string, Tensor>>& bound() const {
    return order_;
  }

  Graph& graph() { return g_; }
  const ParamStore& store() const { return store_; }
  bool trainable() const { return trainable_; }

 private:
  Graph& g_;
  const ParamStore& store_;
  bool trainable_;
  std::function<bool(const std::string&)> trainable_filter_;
  std::unordered_map<std::string, Tensor> cache_;
  std::vector<std::pair<std::string, Tensor>> order_;
};

}  // namespace scalemix
