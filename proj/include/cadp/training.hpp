#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cadp/data.hpp"
#include "cadp/diagnostics.hpp"
#include "cadp/network.hpp"
#include "cadp/objectives.hpp"

namespace cadp {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps_hat = 1e-8;

  void validate() const;
};

/// Moments for every entry of one parameter store (empty for buffers).
template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(const ParameterStore<T>& params, AdamConfig cfg);
};

/// Bias-corrected Adam on every trainable entry, reading `Parameter::grad`:
/// lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t), theta -= lr_t * m / (sqrt(v) + eps_hat).
/// Throws NumericalError naming the first non-finite gradient before touching
/// any parameter.
template <typename T>
void adam_step(AdamState<T>& state, ParameterStore<T>& params);

enum class TrainMode { kSourceOnly, kDann, kVada, kDirtt };
std::string_view mode_name(TrainMode m);
TrainMode parse_mode(const std::string& s);
std::string_view encoder_loss_name(EncoderLoss e);
EncoderLoss parse_encoder_loss(const std::string& s);

struct TrainConfig {
  LossWeights weights;
  VatConfig vat;
  AdamConfig adam;
  std::size_t iterations = 0;
  std::size_t refinement_interval = 5000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_path;
  TrainMode mode = TrainMode::kVada;
  EncoderLoss encoder_loss = EncoderLoss::kNonSaturating;
  double ema_momentum = 0.998;

  void validate() const;
  /// Weights with the terms the mode switches off set to zero.
  LossWeights effective_weights() const;
  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
};

struct MetricsRow {
  std::uint64_t step = 0;
  TrainMode mode = TrainMode::kVada;
  LossBreakdown loss;
  double src_acc = 0;  // EMA weights; NaN when no evaluation set was given
  double tgt_acc = 0;
  std::uint64_t interval = 0;
};

/// Collects metrics rows and optionally streams them as CSV.
class MetricsLog {
 public:
  static constexpr const char* kHeader =
      "step,mode,l_y,l_d_enc,l_d_disc,l_c,l_v_src,l_v_tgt,l_kl_teacher,total,src_acc,tgt_acc,interval";

  MetricsLog() = default;
  /// Writes the header immediately.
  explicit MetricsLog(std::ostream* out);
  void add(const MetricsRow& row);
  const std::vector<MetricsRow>& rows() const { return rows_; }
  static std::string format(const MetricsRow& row);

 private:
  std::ostream* out_ = nullptr;
  std::vector<MetricsRow> rows_;
};

/// Labeled evaluation sets for the metrics stream; never used for training.
struct EvalSets {
  const DomainDataset* source = nullptr;
  const DomainDataset* target = nullptr;
};

template <typename T>
struct TrainState {
  TrainConfig config;
  Classifier<T> student;
  std::optional<Classifier<T>> teacher;  // refinement only
  EmaState<T> ema;
  std::optional<Discriminator<T>> disc;  // present iff lambda_d > 0
  AdamState<T> adam;
  std::optional<AdamState<T>> adam_disc;
  std::uint64_t step = 0;
  std::uint64_t interval = 0;
  std::uint64_t teacher_refreshes = 0;
  std::size_t source_epoch = 0, source_pos = 0;
  std::size_t target_epoch = 0, target_pos = 0;
  std::size_t vat_fallback_rows = 0;
};

/// Fresh adaptation state (mode source-only, dann or vada).
template <typename T>
TrainState<T> init_train_state(const ArchitectureSpec& spec, const TrainConfig& cfg);

/// Runs adaptation steps until `state.step == until`. Each step: discriminator
/// Adam step on l_d_disc (when lambda_d > 0), classifier Adam step on the
/// total, EMA update.
template <typename T>
void run_vada(TrainState<T>& state, const DomainDataset& source, const UnlabeledView& target, std::uint64_t until,
              const EvalSets& eval, MetricsLog& log);

/// init_train_state + run_vada up to cfg.iterations.
template <typename T>
TrainState<T> train_vada(const ArchitectureSpec& spec, const DomainDataset& source, const UnlabeledView& target,
                         const TrainConfig& cfg, const EvalSets& eval, MetricsLog& log);

/// Refinement state: student, EMA and teacher all start from the EMA weights
/// of `init`; the discriminator and source data are dropped; Adam is fresh.
template <typename T>
TrainState<T> init_refinement_state(const TrainState<T>& init, const TrainConfig& cfg);

/// Runs refinement steps until `state.step == until`. After every step whose
/// count is a multiple of B the teacher takes the current EMA weights.
template <typename T>
void run_dirtt(TrainState<T>& state, const UnlabeledView& target, std::uint64_t until, const EvalSets& eval,
               MetricsLog& log);

template <typename T>
TrainState<T> refine_dirtt(const TrainState<T>& init, const UnlabeledView& target, const TrainConfig& cfg,
                           const EvalSets& eval, MetricsLog& log);

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const TrainState<T>& state);
template <typename T>
TrainState<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
/// Atomic write (temporary file + rename).
template <typename T>
void save_checkpoint(const TrainState<T>& state, const std::string& path);
/// Throws FormatError: kBadMagic, kVersionMismatch, kTruncated, kMalformed,
/// and kArchitectureMismatch when `expected_hash` is given and differs.
template <typename T>
TrainState<T> load_checkpoint(const std::string& path, std::optional<std::uint64_t> expected_hash = std::nullopt);

/// Architecture serialization used inside checkpoints.
std::map<std::string, std::string> spec_to_map(const ArchitectureSpec& spec, const std::string& prefix);
ArchitectureSpec spec_from_map(const std::map<std::string, std::string>& kv, const std::string& prefix);

}  // namespace cadp
