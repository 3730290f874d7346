#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "kadapter/errors.hpp"
#include "kadapter/ndgrad.hpp"

namespace kadapter {

using ndgrad::Shape;
using ndgrad::Tensor;

enum class Init { Normal, Zeros, Ones };

// One named parameter a module declares; layouts are the single source of
// truth both for allocation and for parameter counting.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::Normal;
};

using Layout = std::vector<ParamSpec>;

inline constexpr double kInitStddev = 0.02;

inline bool has_prefix(std::string_view name, std::string_view prefix) {
  return name.substr(0, prefix.size()) == prefix;
}

// Named parameter tensors, iterated in lexicographic name order.
class ParamStore {
 public:
  // Allocates every spec in declaration order, drawing Normal inits from rng.
  void materialize(const Layout& layout, std::mt19937_64& rng,
                   double stddev = kInitStddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    for (const auto& spec : layout) {
      if (params_.count(spec.name)) {
        throw ConfigError("parameter declared twice: " + spec.name);
      }
      std::vector<double> values(ndgrad::numel(spec.shape), 0.0);
      switch (spec.init) {
        case Init::Normal:
          for (double& v : values) v = normal(rng);
          break;
        case Init::Ones:
          std::fill(values.begin(), values.end(), 1.0);
          break;
        case Init::Zeros:
          break;
      }
      params_.emplace(spec.name, Tensor::from(spec.shape, std::move(values), true));
    }
  }

  void insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw ConfigError("duplicate parameter: " + name);
    params_.emplace(name, std::move(t));
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::size_t count() const { return params_.size(); }

  std::size_t numel(std::string_view prefix = "") const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) {
      if (has_prefix(name, prefix)) n += t.size();
    }
    return n;
  }

  // A parameter is trainable unless one of the prefixes matches its name.
  void apply_freeze(const std::vector<std::string>& freeze_prefixes) {
    for (auto& [name, t] : params_) {
      bool frozen = false;
      for (const auto& p : freeze_prefixes) frozen = frozen || has_prefix(name, p);
      t.set_requires_grad(!frozen);
    }
  }

  void clear_grads() {
    for (auto& [name, t] : params_) t.clear_grad();
  }

  // Copies values of every parameter under `prefix` from `other` into this
  // store, allocating entries that do not exist yet.
  void assign_from(const ParamStore& other, std::string_view prefix = "") {
    for (const auto& [name, src] : other.params_) {
      if (!has_prefix(name, prefix)) continue;
      auto it = params_.find(name);
      if (it == params_.end()) {
        params_.emplace(name, src.detach());
        continue;
      }
      if (it->second.shape() != src.shape()) {
        throw DimensionError("parameter " + name + " has shape " +
                             ndgrad::shape_str(it->second.shape()) +
                             ", source has " + ndgrad::shape_str(src.shape()));
      }
      std::copy(src.data().begin(), src.data().end(),
                it->second.mutable_data().begin());
    }
  }

  ParamStore subset(std::string_view prefix) const {
    ParamStore out;
    for (const auto& [name, t] : params_) {
      if (has_prefix(name, prefix)) out.params_.emplace(name, t.detach());
    }
    return out;
  }

  // Deep copy; no tensor is shared with the source.
  ParamStore clone() const { return subset(""); }

 private:
  std::map<std::string, Tensor> params_;
};

inline std::size_t layout_numel(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& spec : layout) n += ndgrad::numel(spec.shape);
  return n;
}

inline void append(Layout& dst, const Layout& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace kadapter
