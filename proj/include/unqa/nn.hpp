#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "unqa/autograd.hpp"
#include "unqa/core.hpp"

namespace unqa {

/// Parameter groups, used by freeze rules and checksums.
enum class ParamGroup { spatial, audio, motion, head };

inline std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::spatial: return "spatial";
    case ParamGroup::audio: return "audio";
    case ParamGroup::motion: return "motion";
    case ParamGroup::head: return "head";
  }
  return "unknown";
}

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  void zero_grad() { grad.assign(value.size(), 0.0); }
};

/// Ordered collection of named parameters belonging to one group.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(ParamGroup group) : group_(group) {}

  ParamGroup group() const { return group_; }

  Parameter& add(const std::string& name, Shape shape) {
    require(index_.find(name) == index_.end(), ErrorCode::duplicate,
            "parameter '" + name + "' declared twice");
    index_[name] = params_.size();
    const std::size_t n = numel(shape);
    params_.push_back(Parameter{name, std::move(shape), std::vector<double>(n, 0.0), {}});
    return params_.back();
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::invalid_argument, "unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::invalid_argument, "unknown parameter '" + name + "'");
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  void update_digest(Fnv1a& hash) const {
    for (const auto& p : params_) {
      hash.update(p.name);
      hash.update(p.value);
    }
  }

  std::uint64_t checksum() const {
    Fnv1a hash;
    update_digest(hash);
    return hash.digest();
  }

 private:
  ParamGroup group_ = ParamGroup::head;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binds parameters into one autodiff graph. Parameters of trainable groups
/// become grad-requiring leaves; everything else enters as constants. After
/// backward(), accumulate() adds the leaf gradients into Parameter::grad.
class GradContext {
 public:
  GradContext() = default;
  explicit GradContext(std::vector<ParamGroup> trainable) : trainable_(std::move(trainable)) {}

  static GradContext inference() { return GradContext{}; }

  bool tracks(ParamGroup group) const {
    return std::find(trainable_.begin(), trainable_.end(), group) != trainable_.end();
  }

  Var bind(Parameter& p, ParamGroup group) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var v = tracks(group) ? variable(p.shape, p.value) : constant(p.shape, p.value);
    bound_.emplace(&p, v);
    if (v.requires_grad()) order_.push_back(&p);
    return v;
  }

  Var bind(ParameterSet& set, const std::string& name) { return bind(set.at(name), set.group()); }

  void accumulate() {
    for (Parameter* p : order_) {
      const Var& v = bound_.at(p);
      if (v.grad().empty()) continue;
      if (p->grad.size() != p->value.size()) p->zero_grad();
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += v.grad()[i];
    }
  }

 private:
  std::vector<ParamGroup> trainable_;
  std::unordered_map<Parameter*, Var> bound_;
  std::vector<Parameter*> order_;
};

// Initializers ---------------------------------------------------------------

inline void init_uniform(Parameter& p, Rng& rng, double bound) {
  for (double& v : p.value) v = rng.uniform(-bound, bound);
}

inline void init_normal(Parameter& p, Rng& rng, double stddev) {
  for (double& v : p.value) v = rng.normal(0.0, stddev);
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_fan_in(Parameter& p, Rng& rng, std::size_t fan_in) {
  init_uniform(p, rng, 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1))));
}

// Optimizer ------------------------------------------------------------------

/// Adaptive-moment optimizer with bias correction and no weight decay.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  explicit Adam(Options options) : options_(options) {}

  void step(std::vector<Parameter*> params) {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (p->grad.size() != p->value.size()) continue;
      auto& [m, v] = moments_[p];
      if (m.empty()) {
        m.assign(p->value.size(), 0.0);
        v.assign(p->value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
        v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p->value[i] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon);
      }
    }
  }

  const Options& options() const { return options_; }

 private:
  Options options_;
  std::size_t t_ = 0;
  std::map<Parameter*, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace unqa
