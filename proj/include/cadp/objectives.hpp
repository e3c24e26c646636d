#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <utility>

#include "cadp/graph.hpp"
#include "cadp/network.hpp"

namespace cadp {

struct LossWeights {
  double lambda_d = 1e-2;
  double lambda_s = 1.0;
  double lambda_t = 1e-2;
  double beta = 1e-2;  // teacher-student KL weight during refinement
  // Independent switches for the two target-side terms of the adaptation
  // objective; refinement always applies both.
  bool target_entropy = true;
  bool target_vat = true;

  void validate() const;
};

enum class EncoderLoss { kNonSaturating, kSaturating };

struct VatConfig {
  double epsilon = 1.0;  // L2 radius over the flattened per-sample input
  double xi = 1e-6;      // probe scale of the power iteration
  int power_iterations = 1;

  void validate() const;
};

/// Every reported component is in nats. Terms that are not computed are
/// reported as 0; `total` is always the weighted sum of the components.
struct LossBreakdown {
  double l_y = 0;
  double l_d_enc = 0;
  double l_d_disc = 0;
  double l_c = 0;
  double l_v_src = 0;
  double l_v_tgt = 0;
  double l_kl_teacher = 0;
  double total = 0;
};

/// Total of the adaptation objective assembled from reported components.
double vada_total(const LossBreakdown& b, const LossWeights& w);
/// Total of the refinement objective assembled from reported components.
double dirtt_total(const LossBreakdown& b, const LossWeights& w);

// ---------------------------------------------------------------------------
// Value-level losses (double accumulation). Rows of `p`, `q`, `y` are [N, K].

template <typename T>
double cross_entropy(const Tensor<T>& p, const Tensor<T>& y);
template <typename T>
double conditional_entropy(const Tensor<T>& p);
double kl_categorical(std::span<const double> p, std::span<const double> q);
/// Mean over rows of KL(p_n || q_n).
template <typename T>
double kl_mean(const Tensor<T>& p, const Tensor<T>& q);
/// (loss_disc, loss_enc) from discriminator outputs on source and target.
std::pair<double, double> discriminator_losses(std::span<const double> d_source, std::span<const double> d_target,
                                               EncoderLoss form = EncoderLoss::kNonSaturating);

// ---------------------------------------------------------------------------
// Graph-level losses. Each returns a one-element node.

template <typename T>
Var cross_entropy(Graph<T>& g, Var p, Var y);
template <typename T>
Var conditional_entropy(Graph<T>& g, Var p);
/// Mean KL(p || q) with `p` detached.
template <typename T>
Var kl_mean(Graph<T>& g, Var p, Var q);

struct DiscriminatorLossVars {
  Var disc;
  Var enc;
};
template <typename T>
DiscriminatorLossVars discriminator_losses(Graph<T>& g, Var d_source, Var d_target, EncoderLoss form);

// ---------------------------------------------------------------------------
// Virtual adversarial perturbation.

/// Stream keys of the stochastic layers for each branch. Clean and perturbed
/// forwards of one domain share a key, so they draw identical masks.
inline constexpr std::uint64_t kSourceStream = 0x5111;
inline constexpr std::uint64_t kTargetStream = 0x7222;
inline constexpr std::uint64_t kTeacherStream = 0x7ea0;

template <typename T>
struct VatPerturbation {
  Tensor<T> r;                    // same shape as x, per-sample L2 norm epsilon
  std::size_t fallback_rows = 0;  // rows whose probe gradient vanished
};

/// One or more power iterations towards argmax_r KL(h(x) || h(x + r)) with
/// ||r|| = epsilon per sample. Parameters receive no gradient and batchnorm
/// running statistics are left untouched.
template <typename T>
VatPerturbation<T> vat_perturbation(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x,
                                    const VatConfig& cfg, std::uint64_t seed, std::uint64_t stream_key = kSourceStream,
                                    Mode mode = Mode::kTrain);
template <typename T>
VatPerturbation<T> vat_perturbation(const Classifier<T>& c, const Tensor<T>& x, const VatConfig& cfg,
                                    std::uint64_t seed, Mode mode = Mode::kTrain) {
  return vat_perturbation(c.spec, c.params, x, cfg, seed, kSourceStream, mode);
}

/// Mean KL(stopgrad h(x) || h(x + r)).
template <typename T>
double vat_loss(const Classifier<T>& c, const Tensor<T>& x, const Tensor<T>& r, std::uint64_t seed = 0,
                Mode mode = Mode::kEval);

struct TargetClusterLoss {
  double l_v = 0;
  double l_c = 0;
  double total = 0;
};
template <typename T>
TargetClusterLoss target_cluster_loss(const Classifier<T>& c, const Tensor<T>& x_t, const VatConfig& cfg,
                                      std::uint64_t seed = 0, Mode mode = Mode::kEval);

// ---------------------------------------------------------------------------
// Composite objectives as graphs.

struct ObjectiveOptions {
  Mode mode = Mode::kTrain;
  bool update_stats = true;  // the clean target branch (clean source in source-only) folds batch statistics into running buffers
  EncoderLoss encoder_loss = EncoderLoss::kNonSaturating;
};

/// Graph of the adaptation objective for one source and one target batch.
///
/// Node order: classifier branches and their losses, then the discriminator
/// branch on detached features (`l_d_disc`), then from `encoder_mark()` the
/// discriminator re-applied with constant parameters to live features
/// (`l_d_enc`) and the total. After a discriminator update the suffix is
/// re-evaluated with `refresh_encoder`, so the classifier step sees the
/// updated discriminator.
template <typename T>
class VadaObjective {
 public:
  /// `disc` may be null only when lambda_d = 0.
  VadaObjective(Classifier<T>& c, Discriminator<T>* disc, const LossWeights& w, const VatConfig& vat,
                ObjectiveOptions opt = {});

  /// Computes the perturbations, binds the batches and runs a full forward.
  LossBreakdown evaluate(const Tensor<T>& xs, const Tensor<T>& ys, const Tensor<T>& xt, std::uint64_t seed);
  /// Same with perturbations supplied by the caller (held fixed).
  LossBreakdown evaluate_with(const Tensor<T>& xs, const Tensor<T>& ys, const Tensor<T>& xt,
                              const Tensor<T>* r_source, const Tensor<T>* r_target, std::uint64_t seed);

  /// Gradient of l_d_disc into the discriminator parameters.
  void backward_discriminator();
  /// Re-evaluates the encoder-side suffix after the discriminator changed.
  LossBreakdown refresh_encoder();
  /// Gradient of the total into the classifier parameters.
  void backward_total();

  bool uses_discriminator() const { return w_.lambda_d > 0; }
  bool uses_target() const;
  bool uses_source_vat() const { return w_.lambda_s > 0; }
  bool uses_target_vat() const { return w_.lambda_t > 0 && w_.target_vat; }
  std::size_t encoder_mark() const { return encoder_mark_; }
  std::size_t fallback_rows() const { return fallback_rows_; }
  const LossBreakdown& breakdown() const { return last_; }
  Graph<T>& graph() { return *g_; }

 private:
  void build(const Shape& xs_shape, const Shape& xt_shape);
  LossBreakdown read() const;

  Classifier<T>& c_;
  Discriminator<T>* d_;
  LossWeights w_;
  VatConfig vat_;
  ObjectiveOptions opt_;
  std::unique_ptr<Graph<T>> g_;
  Shape xs_shape_, xt_shape_;
  Var xs_, ys_, xt_, xs_adv_, xt_adv_;
  Var l_y_, l_c_, l_v_src_, l_v_tgt_, l_d_disc_, l_d_enc_, total_;
  std::size_t encoder_mark_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t fallback_rows_ = 0;
  LossBreakdown last_;
};

/// Graph of the refinement objective on one target batch:
/// lambda_t * (L_v + L_c) + beta * mean KL(teacher || student). The teacher
/// branch is evaluated in eval mode with constant parameters.
template <typename T>
class DirttObjective {
 public:
  DirttObjective(Classifier<T>& student, const Classifier<T>& teacher, const LossWeights& w, const VatConfig& vat,
                 ObjectiveOptions opt = {});

  LossBreakdown evaluate(const Tensor<T>& xt, std::uint64_t seed);
  LossBreakdown evaluate_with(const Tensor<T>& xt, const Tensor<T>& r_target, std::uint64_t seed);
  void backward_total();
  std::size_t fallback_rows() const { return fallback_rows_; }
  Graph<T>& graph() { return *g_; }

 private:
  void build(const Shape& xt_shape);

  Classifier<T>& student_;
  const Classifier<T>& teacher_;
  LossWeights w_;
  VatConfig vat_;
  ObjectiveOptions opt_;
  std::unique_ptr<Graph<T>> g_;
  Shape xt_shape_;
  Var xt_, xt_adv_;
  Var l_c_, l_v_, l_kl_, total_;
  std::size_t fallback_rows_ = 0;
};

/// Convenience wrappers: one evaluation without gradient.
template <typename T>
LossBreakdown vada_objective(Classifier<T>& c, Discriminator<T>* disc, const Tensor<T>& xs, const Tensor<T>& ys,
                             const Tensor<T>& xt, const LossWeights& w, const VatConfig& vat, std::uint64_t seed = 0,
                             ObjectiveOptions opt = {});
template <typename T>
LossBreakdown dirtt_objective(Classifier<T>& student, const Classifier<T>& teacher, const Tensor<T>& xt,
                              const LossWeights& w, const VatConfig& vat, std::uint64_t seed = 0,
                              ObjectiveOptions opt = {});

}  // namespace cadp
