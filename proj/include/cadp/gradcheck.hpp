#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cadp/tensor.hpp"

namespace cadp {

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0;
  double max_abs_error = 0;
};

/// Comparison of analytic gradients against central differences. The relative
/// error of one parameter is max|analytic - numeric| divided by the larger of
/// the two gradients' max-norms (falls back to the absolute error when both
/// gradients vanish).
struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0;
  double tolerance = 0;
  bool pass = false;
};

template <typename T>
struct GradientProbe {
  std::string name;
  Tensor<T>* value;  // perturbed in place, restored afterwards
};

template <typename T>
struct FiniteDifferenceResult {
  std::vector<Tensor<T>> estimate;
  GradCheckReport report;
};

/// Central-difference estimate (loss(θ+h·e_i) − loss(θ−h·e_i)) / 2h for every
/// coordinate of every probe. Throws OracleError if two unperturbed calls of
/// `loss` disagree.
template <typename T>
std::vector<Tensor<T>> finite_difference_gradient(const std::function<T()>& loss,
                                                  const std::vector<GradientProbe<T>>& probes, T h);

template <typename T>
GradCheckReport compare_gradients(const std::vector<GradientProbe<T>>& probes,
                                  const std::vector<Tensor<T>>& analytic, const std::vector<Tensor<T>>& numeric,
                                  double tolerance);

/// Estimates the gradient and checks it against `analytic` in one call.
template <typename T>
FiniteDifferenceResult<T> finite_difference_oracle(const std::function<T()>& loss,
                                                   const std::vector<GradientProbe<T>>& probes,
                                                   const std::vector<Tensor<T>>& analytic, T h, double tolerance);

}  // namespace cadp
