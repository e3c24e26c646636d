#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cadp/tensor.hpp"

namespace cadp {

enum class DomainTag { kSource, kTarget };
std::string_view domain_name(DomainTag tag);

/// Inputs only. This is the only form in which target data reaches a trainer,
/// so target labels cannot leak into training.
class UnlabeledView {
 public:
  UnlabeledView() = default;
  UnlabeledView(std::shared_ptr<const Tensor<float>> inputs, DomainTag tag, std::size_t num_classes);

  const Tensor<float>& inputs() const { return *inputs_; }
  std::size_t size() const { return inputs_ ? inputs_->dim(0) : 0; }
  Shape sample_shape() const { return inputs_->row_shape(); }
  std::size_t num_classes() const { return num_classes_; }
  DomainTag tag() const { return tag_; }
  Tensor<float> gather(const std::vector<std::size_t>& idx) const { return inputs_->gather_rows(idx); }

 private:
  std::shared_ptr<const Tensor<float>> inputs_;
  DomainTag tag_ = DomainTag::kSource;
  std::size_t num_classes_ = 0;
};

/// Labeled samples of one domain. Immutable; copies share storage.
class DomainDataset {
 public:
  DomainDataset() = default;
  /// `classes[i]` < num_classes. Throws ShapeError/ConfigError on mismatch.
  DomainDataset(Tensor<float> inputs, std::vector<std::uint32_t> classes, std::size_t num_classes, DomainTag tag);

  std::size_t size() const { return classes_.size(); }
  Shape sample_shape() const { return inputs_->row_shape(); }
  std::size_t num_classes() const { return num_classes_; }
  DomainTag tag() const { return tag_; }
  const Tensor<float>& inputs() const { return *inputs_; }
  const std::vector<std::uint32_t>& classes() const { return classes_; }
  /// One-hot rows [N, K].
  Tensor<float> one_hot() const;
  Tensor<float> one_hot(const std::vector<std::size_t>& idx) const;

  UnlabeledView unlabeled() const { return UnlabeledView(inputs_, tag_, num_classes_); }
  DomainDataset subset(const std::vector<std::size_t>& idx) const;
  DomainDataset with_tag(DomainTag tag) const;

 private:
  std::shared_ptr<const Tensor<float>> inputs_;
  std::vector<std::uint32_t> classes_;
  std::size_t num_classes_ = 0;
  DomainTag tag_ = DomainTag::kSource;
};

// ---------------------------------------------------------------------------
// Two moons

struct MoonsConfig {
  std::size_t n_per_domain = 1000;
  double noise_std = 0.1;
  double rotation_degrees = 30.0;
  std::array<double, 2> translation{0.0, 0.0};
  std::uint64_t seed = 0;

  void validate() const;
};

struct MoonsPair {
  DomainDataset source;
  DomainDataset target;
  /// Target samples before rotation and translation, row-paired with `target`.
  Tensor<double> target_unshifted;
  std::array<double, 2> center{0.0, 0.0};  // rotation center (centroid of the unshifted target draw)
};

/// Independent draws for the two domains from the same two-half-circle
/// generator; the target draw is rotated about its centroid and translated.
MoonsPair make_moons_pair(const MoonsConfig& cfg);

/// Applies the target shift to one 2-D point.
std::array<double, 2> shift_point(std::array<double, 2> p, const MoonsConfig& cfg, std::array<double, 2> center);

// ---------------------------------------------------------------------------
// Digits

/// Reads IDX image (magic 0x803) and label (magic 0x801) files, gzipped or
/// raw. Images become [N, 1, H, W] in [0, 1]; labels must be < 10.
DomainDataset load_idx(const std::string& images_path, const std::string& labels_path,
                       DomainTag tag = DomainTag::kSource);

/// Zero-pads every image to [C, height, width], centred.
DomainDataset pad_images(const DomainDataset& d, std::size_t height, std::size_t width);
/// Repeats a single channel `channels` times.
DomainDataset broadcast_channels(const DomainDataset& d, std::size_t channels);

struct ColorFieldConfig {
  std::size_t grid = 4;  // coarse control points per side, bilinearly upsampled
};

/// Blends each single-channel image with its own smooth random color field:
/// out_c = |digit - field_c|. Labels are preserved.
DomainDataset synthesize_colored_target(const DomainDataset& src, std::uint64_t seed, ColorFieldConfig cfg = {});

/// Per-channel spatial standardization of one sample [C, H, W]; the standard
/// deviation is floored at 1e-5 so constant channels map to zeros.
Tensor<float> instance_normalize(const Tensor<float>& sample);
/// Batch form over [N, C, H, W], computed in double.
Tensor<double> instance_normalize(const Tensor<double>& batch);
DomainDataset instance_normalize(const DomainDataset& d);

// ---------------------------------------------------------------------------
// Batching and splits

/// Endless stream of fixed-size index batches. Each epoch is a permutation
/// derived from (seed, epoch); a batch crossing an epoch boundary takes the
/// remainder of one permutation and the head of the next.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();
  std::size_t epoch() const { return epoch_; }
  std::size_t position() const { return pos_; }
  /// Restores a state captured with epoch()/position().
  void seek(std::size_t epoch, std::size_t position);

 private:
  void shuffle();

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0, pos_ = 0;
  std::vector<std::size_t> perm_;
};

struct ValidationSplit {
  DomainDataset train;
  DomainDataset validation;
};
/// Random labeled hold-out of `n_validation` samples (used for tuning only).
ValidationSplit split_validation(const DomainDataset& d, std::size_t n_validation, std::uint64_t seed);

/// Dataset cache in the shared array container.
void save_dataset(const std::string& path, const DomainDataset& d);
DomainDataset load_dataset(const std::string& path);

}  // namespace cadp
