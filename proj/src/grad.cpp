#include "tsq/grad.hpp"

#include <algorithm>
#include <cmath>

namespace tsq {

template <class T>
void ParamSet<T>::check_finite() const {
  for (const auto& [name, t] : params_) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!std::isfinite(static_cast<double>(t[i]))) {
        throw NumericalError("non-finite value in parameter " + name);
      }
    }
  }
}

template <class T>
T ParamSet<T>::sum_squares() const {
  T total = T(0);
  for (const auto& [name, t] : params_) {
    for (std::size_t i = 0; i < t.size(); ++i) total += t[i] * t[i];
  }
  return total;
}

template <class T>
FdReport<T> fd_check(const std::function<T(const ParamSet<T>&)>& f,
                     const ParamSet<T>& p, T h, const ParamSet<T>& analytic,
                     T tol) {
  if (!(h > T(0))) throw NumericalError("fd_check requires h > 0");
  FdReport<T> report;
  report.pass = true;
  ParamSet<T> probe = p;
  for (const auto& [name, t] : p) {
    const Tensor<T>& grad = analytic.at(name);
    if (!grad.same_shape(t)) {
      throw ShapeError("analytic gradient shape mismatch for " + name);
    }
    FdRow<T> row;
    row.name = name;
    Tensor<T>& pt = probe.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T saved = pt[i];
      pt[i] = saved + h;
      const T f_plus = f(probe);
      pt[i] = saved - h;
      const T f_minus = f(probe);
      pt[i] = saved;
      if (!std::isfinite(static_cast<double>(f_plus)) ||
          !std::isfinite(static_cast<double>(f_minus))) {
        throw NumericalError("non-finite objective during fd_check of " + name);
      }
      const T fd = (f_plus - f_minus) / (T(2) * h);
      const T denom = std::max({std::abs(fd), std::abs(grad[i]), T(1e-8)});
      row.max_rel_err = std::max(row.max_rel_err, std::abs(fd - grad[i]) / denom);
    }
    row.pass = row.max_rel_err < tol;
    report.max_rel_err = std::max(report.max_rel_err, row.max_rel_err);
    report.pass = report.pass && row.pass;
    report.rows.push_back(std::move(row));
  }
  return report;
}

template class ParamSet<float>;
template class ParamSet<double>;
template FdReport<float> fd_check(const std::function<float(const ParamSet<float>&)>&,
                                  const ParamSet<float>&, float,
                                  const ParamSet<float>&, float);
template FdReport<double> fd_check(const std::function<double(const ParamSet<double>&)>&,
                                   const ParamSet<double>&, double,
                                   const ParamSet<double>&, double);

}  // namespace tsq
