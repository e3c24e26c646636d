#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cadp/data.hpp"
#include "cadp/network.hpp"

namespace cadp {

enum class WeightsUsed { kEma, kRaw };
std::string_view weights_name(WeightsUsed w);

struct EvalReport {
  std::string dataset;
  double accuracy = 0;      // correct / count
  double mean_entropy = 0;  // nats
  std::size_t count = 0;
  std::size_t correct = 0;
  WeightsUsed weights = WeightsUsed::kEma;

  double error() const { return 1.0 - accuracy; }
};

/// Row-wise argmax; ties go to the lowest class index.
template <typename T>
std::vector<std::uint32_t> argmax_rows(const Tensor<T>& p);

/// Eval-mode accuracy of `params` on a labeled view. `weights` only labels
/// the report; the caller decides which parameter set is passed.
template <typename T>
EvalReport evaluate(const ArchitectureSpec& spec, const ParameterStore<T>& params, const DomainDataset& data,
                    WeightsUsed weights, std::string tag = {});

struct ProbeConfig {
  double train_fraction = 0.8;
  std::size_t steps = 500;  // full-batch Adam steps
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
};

struct JsdProbeReport {
  std::string layer;
  double bound = 0;            // clamped to [0, ln 2]
  double bound_unclamped = 0;  // ln 2 - best held-out loss
  double heldout_loss = 0;     // best held-out balanced binary cross-entropy (nats)
  double train_accuracy = 0;
  double heldout_accuracy = 0;
  std::size_t n_source = 0;  // after balancing
  std::size_t n_target = 0;
  std::string protocol;

  /// Single-line JSON record.
  std::string to_json() const;
};

/// Lower bound on the Jensen-Shannon divergence between two feature sets,
/// from a logistic-regression probe predicting domain origin.
/// Rows are samples; both sets need >= 10 rows and the same width.
JsdProbeReport jsd_lower_bound(const Tensor<double>& source, const Tensor<double>& target, const ProbeConfig& cfg = {},
                               std::string layer = {});

/// Layer identifiers: "input" or "L-k" (k-th layer from the end, L-0 being the output).
long parse_layer_id(const ArchitectureSpec& spec, const std::string& id);
std::string layer_id(const ArchitectureSpec& spec, long layer);

struct LayerSweep {
  std::vector<JsdProbeReport> probes;
  EvalReport source;
  EvalReport target;
};
template <typename T>
LayerSweep layer_probe_sweep(const ArchitectureSpec& spec, const ParameterStore<T>& params,
                             const DomainDataset& source, const DomainDataset& target,
                             const std::vector<std::string>& layers, const ProbeConfig& cfg = {},
                             WeightsUsed weights = WeightsUsed::kEma);

struct GridBounds {
  double x0_min = -2, x0_max = 3, x1_min = -2, x1_max = 2;
};
/// CSV `x0,x1,p_class0..` with one row per grid point; x1 varies slowest.
template <typename T>
void export_decision_grid(const ArchitectureSpec& spec, const ParameterStore<T>& params, const GridBounds& bounds,
                          std::size_t resolution, std::ostream& out);

struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;  // row-major: (a-label, b-label)

  std::uint64_t at(std::size_t i, std::size_t j) const { return counts[i * k + j]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
};
ConfusionMatrix confusion_matrix(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b,
                                 std::size_t k);

}  // namespace cadp
