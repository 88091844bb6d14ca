#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tsq/tensor.hpp"

namespace tsq {

// Named parameter collection with deterministic (sorted) iteration order.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void insert(const std::string& name, Tensor<T> t) {
    auto [it, fresh] = params_.emplace(name, std::move(t));
    (void)it;
    if (!fresh) throw ConfigError("duplicate parameter name: " + name);
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const {
    return params_.count(name) != 0;
  }

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

  std::size_t count() const { return params_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  static ParamSet zeros_like(const ParamSet& other) {
    ParamSet z;
    for (const auto& [name, t] : other.params_) {
      z.params_.emplace(name, Tensor<T>(t.shape()));
    }
    return z;
  }

  // Throws NumericalError on the first non-finite entry.
  void check_finite() const;

  // Sum of squares over every entry (the weight-decay term of the loss).
  T sum_squares() const;

 private:
  Map params_;
};

template <class T>
struct FdRow {
  std::string name;
  T max_rel_err = T(0);
  bool pass = false;
};

template <class T>
struct FdReport {
  std::vector<FdRow<T>> rows;
  T max_rel_err = T(0);
  bool pass = false;
};

// Central-difference check of analytic gradients: perturbs every entry of
// every parameter by +-h, compares (f(p+h e) - f(p-h e)) / 2h against the
// analytic value with relative error max(|a|,|b|,1e-8) in the denominator.
template <class T>
FdReport<T> fd_check(const std::function<T(const ParamSet<T>&)>& f,
                     const ParamSet<T>& p, T h, const ParamSet<T>& analytic,
                     T tol);

}  // namespace tsq
