#include "cadp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cadp {

template <typename T>
std::vector<Tensor<T>> finite_difference_gradient(const std::function<T()>& loss,
                                                  const std::vector<GradientProbe<T>>& probes, T h) {
  if (!(h > T{0})) throw UsageError("finite difference: step h must be positive");
  const T base = loss();
  const T again = loss();
  if (std::memcmp(&base, &again, sizeof(T)) != 0) {
    throw OracleError("finite difference: loss is not deterministic (" + std::to_string(base) + " vs " +
                      std::to_string(again) + ")");
  }
  std::vector<Tensor<T>> out;
  out.reserve(probes.size());
  for (const auto& probe : probes) {
    Tensor<T>& t = *probe.value;
    Tensor<T> g(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T orig = t[i];
      t[i] = orig + h;
      const T up = loss();
      t[i] = orig - h;
      const T down = loss();
      t[i] = orig;
      g[i] = (up - down) / (T{2} * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename T>
GradCheckReport compare_gradients(const std::vector<GradientProbe<T>>& probes,
                                  const std::vector<Tensor<T>>& analytic, const std::vector<Tensor<T>>& numeric,
                                  double tolerance) {
  if (analytic.size() != probes.size() || numeric.size() != probes.size()) {
    throw UsageError("compare_gradients: probe and gradient counts differ");
  }
  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const auto& a = analytic[p];
    const auto& n = numeric[p];
    if (a.shape() != n.shape()) throw ShapeError("compare_gradients: shape mismatch for " + probes[p].name);
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(n[i])));
      scale = std::max({scale, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(n[i]))});
    }
    GradCheckEntry e;
    e.name = probes[p].name;
    e.max_abs_error = diff;
    e.max_relative_error = scale > 1e-10 ? diff / scale : diff;
    report.max_relative_error = std::max(report.max_relative_error, e.max_relative_error);
    report.entries.push_back(std::move(e));
  }
  report.pass = report.max_relative_error <= tolerance;
  return report;
}

template <typename T>
FiniteDifferenceResult<T> finite_difference_oracle(const std::function<T()>& loss,
                                                   const std::vector<GradientProbe<T>>& probes,
                                                   const std::vector<Tensor<T>>& analytic, T h, double tolerance) {
  FiniteDifferenceResult<T> r;
  r.estimate = finite_difference_gradient(loss, probes, h);
  r.report = compare_gradients(probes, analytic, r.estimate, tolerance);
  return r;
}

#define CADP_INSTANTIATE(T)                                                                                     \
  template std::vector<Tensor<T>> finite_difference_gradient<T>(const std::function<T()>&,                     \
                                                                const std::vector<GradientProbe<T>>&, T);      \
  template GradCheckReport compare_gradients<T>(const std::vector<GradientProbe<T>>&,                          \
                                                const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,  \
                                                double);                                                       \
  template FiniteDifferenceResult<T> finite_difference_oracle<T>(                                              \
      const std::function<T()>&, const std::vector<GradientProbe<T>>&, const std::vector<Tensor<T>>&, T, double);

CADP_INSTANTIATE(float)
CADP_INSTANTIATE(double)

#undef CADP_INSTANTIATE

}  // namespace cadp
