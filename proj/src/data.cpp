#include "cadp/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "cadp/array_io.hpp"
#include "cadp/errors.hpp"
#include "cadp/rng.hpp"

namespace cadp {

std::string_view domain_name(DomainTag tag) { return tag == DomainTag::kSource ? "source" : "target"; }

UnlabeledView::UnlabeledView(std::shared_ptr<const Tensor<float>> inputs, DomainTag tag, std::size_t num_classes)
    : inputs_(std::move(inputs)), tag_(tag), num_classes_(num_classes) {}

DomainDataset::DomainDataset(Tensor<float> inputs, std::vector<std::uint32_t> classes, std::size_t num_classes,
                             DomainTag tag)
    : classes_(std::move(classes)), num_classes_(num_classes), tag_(tag) {
  if (inputs.rank() < 2) throw ShapeError("dataset inputs must be [N, ...], got " + to_string(inputs.shape()));
  if (inputs.dim(0) != classes_.size()) {
    throw ShapeError("dataset has " + std::to_string(inputs.dim(0)) + " inputs but " +
                     std::to_string(classes_.size()) + " labels");
  }
  if (classes_.empty()) throw ConfigError("dataset is empty");
  if (num_classes_ < 2) throw ConfigError("dataset needs at least two classes");
  for (auto c : classes_)
    if (c >= num_classes_) throw ConfigError("label " + std::to_string(c) + " out of range");
  inputs_ = std::make_shared<const Tensor<float>>(std::move(inputs));
}

Tensor<float> DomainDataset::one_hot() const {
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), 0);
  return one_hot(all);
}

Tensor<float> DomainDataset::one_hot(const std::vector<std::size_t>& idx) const {
  Tensor<float> y({idx.size(), num_classes_}, 0.0f);
  for (std::size_t i = 0; i < idx.size(); ++i) y.at(i, classes_.at(idx[i])) = 1.0f;
  return y;
}

DomainDataset DomainDataset::subset(const std::vector<std::size_t>& idx) const {
  std::vector<std::uint32_t> cls;
  cls.reserve(idx.size());
  for (auto i : idx) cls.push_back(classes_.at(i));
  return DomainDataset(inputs_->gather_rows(idx), std::move(cls), num_classes_, tag_);
}

DomainDataset DomainDataset::with_tag(DomainTag tag) const {
  DomainDataset d = *this;
  d.tag_ = tag;
  return d;
}

// ---------------------------------------------------------------------------
// Moons

void MoonsConfig::validate() const {
  if (n_per_domain < 2) throw ConfigError("moons: n_per_domain must be >= 2");
  if (!(noise_std >= 0) || !std::isfinite(noise_std)) throw ConfigError("moons: noise_std must be >= 0");
  if (!std::isfinite(rotation_degrees) || !std::isfinite(translation[0]) || !std::isfinite(translation[1])) {
    throw ConfigError("moons: rotation and translation must be finite");
  }
}

namespace {

struct MoonsDraw {
  std::vector<std::array<double, 2>> points;
  std::vector<std::uint32_t> classes;
};

MoonsDraw draw_moons(std::size_t n, double noise, Rng& rng) {
  const std::size_t n_outer = n / 2;
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  MoonsDraw raw;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = angle(rng);
    const bool outer = i < n_outer;
    std::array<double, 2> p = outer ? std::array<double, 2>{std::cos(t), std::sin(t)}
                                    : std::array<double, 2>{1.0 - std::cos(t), 0.5 - std::sin(t)};
    p[0] += noise * jitter(rng);
    p[1] += noise * jitter(rng);
    raw.points.push_back(p);
    raw.classes.push_back(outer ? 0 : 1);
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MoonsDraw out;
  for (auto i : perm) {
    out.points.push_back(raw.points[i]);
    out.classes.push_back(raw.classes[i]);
  }
  return out;
}

Tensor<float> to_tensor(const std::vector<std::array<double, 2>>& pts) {
  Tensor<float> t({pts.size(), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.at(i, 0) = static_cast<float>(pts[i][0]);
    t.at(i, 1) = static_cast<float>(pts[i][1]);
  }
  return t;
}

}  // namespace

std::array<double, 2> shift_point(std::array<double, 2> p, const MoonsConfig& cfg, std::array<double, 2> center) {
  const double a = cfg.rotation_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double dx = p[0] - center[0], dy = p[1] - center[1];
  return {c * dx - s * dy + center[0] + cfg.translation[0], s * dx + c * dy + center[1] + cfg.translation[1]};
}

MoonsPair make_moons_pair(const MoonsConfig& cfg) {
  cfg.validate();
  Rng src_rng = make_rng({cfg.seed, 0x5u});
  Rng tgt_rng = make_rng({cfg.seed, 0x7u});
  MoonsDraw src = draw_moons(cfg.n_per_domain, cfg.noise_std, src_rng);
  MoonsDraw tgt = draw_moons(cfg.n_per_domain, cfg.noise_std, tgt_rng);

  MoonsPair out;
  for (const auto& p : tgt.points) {
    out.center[0] += p[0];
    out.center[1] += p[1];
  }
  out.center[0] /= static_cast<double>(tgt.points.size());
  out.center[1] /= static_cast<double>(tgt.points.size());
  out.target_unshifted = Tensor<double>({tgt.points.size(), 2});
  std::vector<std::array<double, 2>> shifted;
  for (std::size_t i = 0; i < tgt.points.size(); ++i) {
    out.target_unshifted.at(i, 0) = tgt.points[i][0];
    out.target_unshifted.at(i, 1) = tgt.points[i][1];
    shifted.push_back(shift_point(tgt.points[i], cfg, out.center));
  }
  out.source = DomainDataset(to_tensor(src.points), std::move(src.classes), 2, DomainTag::kSource);
  out.target = DomainDataset(to_tensor(shifted), std::move(tgt.classes), 2, DomainTag::kTarget);
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw FormatError(FormatError::Kind::kIo, "cannot open " + path);
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int err = 0;
      const std::string msg = gzerror(f, &err);
      gzclose(f);
      throw FormatError(FormatError::Kind::kTruncated, path + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(FormatError::Kind::kTruncated, path + ": truncated IDX header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void check_payload(const std::vector<std::uint8_t>& b, std::size_t header, std::size_t payload,
                   const std::string& path) {
  if (b.size() < header + payload) throw FormatError(FormatError::Kind::kTruncated, path + ": truncated IDX payload");
  if (b.size() > header + payload) throw FormatError(FormatError::Kind::kMalformed, path + ": trailing bytes");
}

}  // namespace

DomainDataset load_idx(const std::string& images_path, const std::string& labels_path, DomainTag tag) {
  const auto img = read_maybe_gz(images_path);
  const auto lab = read_maybe_gz(labels_path);
  const std::uint32_t img_magic = be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    throw FormatError(FormatError::Kind::kBadMagic, images_path + ": image magic " + std::to_string(img_magic));
  }
  const std::uint32_t lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) {
    throw FormatError(FormatError::Kind::kBadMagic, labels_path + ": label magic " + std::to_string(lab_magic));
  }
  const std::size_t n = be32(img, 4, images_path), h = be32(img, 8, images_path), w = be32(img, 12, images_path);
  const std::size_t n_lab = be32(lab, 4, labels_path);
  if (n != n_lab) {
    throw FormatError(FormatError::Kind::kDimensionMismatch,
                      "IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_lab) + " labels");
  }
  if (n == 0 || h == 0 || w == 0) throw FormatError(FormatError::Kind::kDimensionMismatch, "IDX file has a zero dimension");
  check_payload(img, 16, n * h * w, images_path);
  check_payload(lab, 8, n, labels_path);
  Tensor<float> x({n, 1, h, w});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<std::uint32_t> cls(n);
  for (std::size_t i = 0; i < n; ++i) {
    cls[i] = lab[8 + i];
    if (cls[i] >= 10) throw FormatError(FormatError::Kind::kMalformed, labels_path + ": label >= 10");
  }
  return DomainDataset(std::move(x), std::move(cls), 10, tag);
}

DomainDataset pad_images(const DomainDataset& d, std::size_t height, std::size_t width) {
  const Shape s = d.sample_shape();
  if (s.size() != 3) throw ShapeError("pad_images: expected [C, H, W] samples");
  const std::size_t C = s[0], H = s[1], W = s[2];
  if (height < H || width < W) throw ShapeError("pad_images: target size smaller than input");
  const std::size_t top = (height - H) / 2, left = (width - W) / 2, N = d.size();
  Tensor<float> out({N, C, height, width}, 0.0f);
  const auto& in = d.inputs();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          out[((n * C + c) * height + y + top) * width + x + left] = in[((n * C + c) * H + y) * W + x];
  return DomainDataset(std::move(out), d.classes(), d.num_classes(), d.tag());
}

DomainDataset broadcast_channels(const DomainDataset& d, std::size_t channels) {
  const Shape s = d.sample_shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("broadcast_channels: expected single-channel [1, H, W] samples");
  const std::size_t plane = s[1] * s[2], N = d.size();
  Tensor<float> out({N, channels, s[1], s[2]});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy(d.inputs().ptr() + n * plane, d.inputs().ptr() + (n + 1) * plane,
                out.ptr() + (n * channels + c) * plane);
  return DomainDataset(std::move(out), d.classes(), d.num_classes(), d.tag());
}

DomainDataset synthesize_colored_target(const DomainDataset& src, std::uint64_t seed, ColorFieldConfig cfg) {
  const Shape s = src.sample_shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("synthesize_colored_target: input must be single-channel [1, H, W]");
  if (cfg.grid < 2) throw ConfigError("synthesize_colored_target: grid must be >= 2");
  const std::size_t H = s[1], W = s[2], G = cfg.grid, N = src.size();
  Tensor<float> out({N, 3, H, W});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid(G * G * 3);
  for (std::size_t n = 0; n < N; ++n) {
    Rng rng = make_rng({seed, n, 0xc01u});
    for (auto& v : grid) v = u(rng);
    const float* digit = src.inputs().ptr() + n * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      const double gy = H > 1 ? static_cast<double>(y) * (G - 1) / (H - 1) : 0.0;
      const std::size_t y0 = std::min(static_cast<std::size_t>(gy), G - 2);
      const double fy = gy - y0;
      for (std::size_t x = 0; x < W; ++x) {
        const double gx = W > 1 ? static_cast<double>(x) * (G - 1) / (W - 1) : 0.0;
        const std::size_t x0 = std::min(static_cast<std::size_t>(gx), G - 2);
        const double fx = gx - x0;
        for (std::size_t c = 0; c < 3; ++c) {
          auto at = [&](std::size_t gy_, std::size_t gx_) { return grid[(gy_ * G + gx_) * 3 + c]; };
          const double field = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                               fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
          out[((n * 3 + c) * H + y) * W + x] = static_cast<float>(std::abs(digit[y * W + x] - field));
        }
      }
    }
  }
  return DomainDataset(std::move(out), src.classes(), src.num_classes(), DomainTag::kTarget);
}

// ---------------------------------------------------------------------------
// Instance normalization

namespace {

template <typename In, typename Out>
void normalize_planes(const In* x, Out* y, std::size_t planes, std::size_t hw) {
  for (std::size_t p = 0; p < planes; ++p) {
    const In* xp = x + p * hw;
    double acc = 0;
    for (std::size_t q = 0; q < hw; ++q) acc += xp[q];
    const double mu = acc / static_cast<double>(hw);
    double acc2 = 0;
    for (std::size_t q = 0; q < hw; ++q) acc2 += (xp[q] - mu) * (xp[q] - mu);
    const double sd = std::max(std::sqrt(acc2 / static_cast<double>(hw)), 1e-5);
    for (std::size_t q = 0; q < hw; ++q) y[p * hw + q] = static_cast<Out>((xp[q] - mu) / sd);
  }
}

}  // namespace

Tensor<float> instance_normalize(const Tensor<float>& sample) {
  if (sample.rank() != 3) throw ShapeError("instance_normalize: expected one [C, H, W] sample");
  const std::size_t hw = sample.dim(1) * sample.dim(2);
  if (hw < 2) throw ShapeError("instance_normalize: needs H*W >= 2");
  Tensor<float> out(sample.shape());
  normalize_planes(sample.ptr(), out.ptr(), sample.dim(0), hw);
  return out;
}

Tensor<double> instance_normalize(const Tensor<double>& batch) {
  if (batch.rank() != 4) throw ShapeError("instance_normalize: expected [N, C, H, W]");
  const std::size_t hw = batch.dim(2) * batch.dim(3);
  if (hw < 2) throw ShapeError("instance_normalize: needs H*W >= 2");
  Tensor<double> out(batch.shape());
  normalize_planes(batch.ptr(), out.ptr(), batch.dim(0) * batch.dim(1), hw);
  return out;
}

DomainDataset instance_normalize(const DomainDataset& d) {
  const Shape s = d.sample_shape();
  if (s.size() != 3) throw ShapeError("instance_normalize: expected [C, H, W] samples");
  const std::size_t hw = s[1] * s[2];
  if (hw < 2) throw ShapeError("instance_normalize: needs H*W >= 2");
  Tensor<float> out(d.inputs().shape());
  normalize_planes(d.inputs().ptr(), out.ptr(), d.size() * s[0], hw);
  return DomainDataset(std::move(out), d.classes(), d.num_classes(), d.tag());
}

// ---------------------------------------------------------------------------
// Batching

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(batch_size), seed_(seed) {
  if (n_ == 0) throw ConfigError("batch iterator: dataset is empty");
  if (batch_ == 0) throw ConfigError("batch iterator: batch size must be >= 1");
  if (batch_ > n_) {
    throw ConfigError("batch iterator: batch size " + std::to_string(batch_) + " exceeds dataset size " +
                      std::to_string(n_));
  }
  shuffle();
}

void BatchIterator::shuffle() {
  perm_.resize(n_);
  std::iota(perm_.begin(), perm_.end(), 0);
  Rng rng = make_rng({seed_, epoch_, 0xba7cu});
  std::shuffle(perm_.begin(), perm_.end(), rng);
}

std::vector<std::size_t> BatchIterator::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (pos_ == n_) {
      ++epoch_;
      pos_ = 0;
      shuffle();
    }
    out.push_back(perm_[pos_++]);
  }
  return out;
}

void BatchIterator::seek(std::size_t epoch, std::size_t position) {
  if (position > n_) throw ConfigError("batch iterator: position out of range");
  epoch_ = epoch;
  pos_ = position;
  shuffle();
}

ValidationSplit split_validation(const DomainDataset& d, std::size_t n_validation, std::uint64_t seed) {
  if (n_validation == 0 || n_validation >= d.size()) {
    throw ConfigError("split_validation: need 0 < n_validation < dataset size");
  }
  std::vector<std::size_t> perm(d.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng({seed, 0x7a1du});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<long>(n_validation));
  std::vector<std::size_t> train(perm.begin() + static_cast<long>(n_validation), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {d.subset(train), d.subset(val)};
}

// ---------------------------------------------------------------------------
// Cache

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

void save_dataset(const std::string& path, const DomainDataset& d) {
  Archive a;
  a.meta["kind"] = "dataset";
  a.meta["num_classes"] = std::to_string(d.num_classes());
  a.meta["tag"] = std::string(domain_name(d.tag()));
  a.put("inputs", d.inputs());
  std::vector<std::uint64_t> cls(d.classes().begin(), d.classes().end());
  a.put_u64("classes", cls);
  write_archive(path, a, kDatasetVersion);
}

DomainDataset load_dataset(const std::string& path) {
  const Archive a = read_archive(path, kDatasetVersion);
  if (a.meta_at("kind") != "dataset") throw FormatError(FormatError::Kind::kMalformed, path + " is not a dataset cache");
  const auto cls64 = a.get_u64("classes");
  std::vector<std::uint32_t> cls(cls64.begin(), cls64.end());
  const DomainTag tag = a.meta_at("tag") == "target" ? DomainTag::kTarget : DomainTag::kSource;
  return DomainDataset(a.get<float>("inputs"), std::move(cls), std::stoul(a.meta_at("num_classes")), tag);
}

}  // namespace cadp
