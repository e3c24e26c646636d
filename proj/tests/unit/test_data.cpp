#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cadp/data.hpp"
#include "cadp/rng.hpp"

using namespace cadp;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cadp_data_" + name);
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Writes an n-image h x w IDX pair; pixel k of image i is (i * 7 + k) mod 256.
std::pair<std::string, std::string> write_idx(std::size_t n, std::size_t h, std::size_t w, std::size_t n_labels,
                                              std::uint32_t image_magic = 0x803) {
  std::vector<std::uint8_t> img, lab;
  put_be32(img, image_magic);
  put_be32(img, static_cast<std::uint32_t>(n));
  put_be32(img, static_cast<std::uint32_t>(h));
  put_be32(img, static_cast<std::uint32_t>(w));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < h * w; ++k) img.push_back(static_cast<std::uint8_t>((i * 7 + k) % 256));
  put_be32(lab, 0x801);
  put_be32(lab, static_cast<std::uint32_t>(n_labels));
  for (std::size_t i = 0; i < n_labels; ++i) lab.push_back(static_cast<std::uint8_t>(i % 10));
  const auto pi = temp_path("images.idx"), pl = temp_path("labels.idx");
  write_bytes(pi, img);
  write_bytes(pl, lab);
  return {pi.string(), pl.string()};
}

FormatError::Kind load_error(const std::pair<std::string, std::string>& files) {
  try {
    load_idx(files.first, files.second);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("expected FormatError");
  return FormatError::Kind::kIo;
}

Tensor<float> random_images(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t({n, c, h, w});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("moons: determinism, labels and exact rotation") {
    MoonsConfig cfg;
    cfg.n_per_domain = 200;
    cfg.translation = {0.3, -0.2};
    const MoonsPair a = make_moons_pair(cfg);
    const MoonsPair b = make_moons_pair(cfg);
    CHECK(a.source.inputs() == b.source.inputs());
    CHECK(a.target.inputs() == b.target.inputs());
    CHECK(a.source.size() == 200);
    CHECK(a.source.num_classes() == 2);
    CHECK(a.target.tag() == DomainTag::kTarget);
    const std::size_t ones = std::count(a.source.classes().begin(), a.source.classes().end(), 1u);
    CHECK(ones == 100);
    const double th = cfg.rotation_degrees * std::acos(-1.0) / 180.0;
    for (std::size_t i = 0; i < 200; ++i) {
      const double x = a.target_unshifted.at(i, 0) - a.center[0], y = a.target_unshifted.at(i, 1) - a.center[1];
      const auto p = shift_point({a.target_unshifted.at(i, 0), a.target_unshifted.at(i, 1)}, cfg, a.center);
      CHECK(p[0] == doctest::Approx(std::cos(th) * x - std::sin(th) * y + a.center[0] + 0.3).epsilon(1e-12));
      CHECK(p[1] == doctest::Approx(std::sin(th) * x + std::cos(th) * y + a.center[1] - 0.2).epsilon(1e-12));
      CHECK(a.target.inputs().at(i, 0) == static_cast<float>(p[0]));
    }
  }

  TEST_CASE("moons without shift draw from one distribution") {
    MoonsConfig cfg;
    cfg.rotation_degrees = 0;
    cfg.n_per_domain = 1000;
    const MoonsPair m = make_moons_pair(cfg);
    for (std::size_t axis = 0; axis < 2; ++axis) {
      double ms = 0, mt = 0, vs = 0;
      for (std::size_t i = 0; i < 1000; ++i) {
        ms += m.source.inputs().at(i, axis);
        mt += m.target.inputs().at(i, axis);
      }
      ms /= 1000;
      mt /= 1000;
      for (std::size_t i = 0; i < 1000; ++i) vs += std::pow(m.source.inputs().at(i, axis) - ms, 2);
      const double sigma = std::sqrt(vs / 999);
      CHECK(std::abs(ms - mt) < 3 * sigma / std::sqrt(1000.0));
    }
  }

  TEST_CASE("moons rotated by 180 degrees swap the class clusters") {
    MoonsConfig cfg;
    cfg.rotation_degrees = 180;
    cfg.n_per_domain = 400;
    const MoonsPair m = make_moons_pair(cfg);
    auto class_mean_y = [](const DomainDataset& d, std::uint32_t k) {
      double s = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (d.classes()[i] == k) s += d.inputs().at(i, 1), ++n;
      return s / static_cast<double>(n);
    };
    // Class 0 sits above class 1 in the source and below it in the target.
    CHECK(class_mean_y(m.source, 0) > class_mean_y(m.source, 1));
    CHECK(class_mean_y(m.target, 0) < class_mean_y(m.target, 1));
  }

  TEST_CASE("moons config validation") {
    MoonsConfig cfg;
    cfg.n_per_domain = 1;
    CHECK_THROWS_AS(make_moons_pair(cfg), ConfigError);
    cfg = MoonsConfig{};
    cfg.noise_std = -0.1;
    CHECK_THROWS_AS(make_moons_pair(cfg), ConfigError);
  }

  TEST_CASE("IDX loading") {
    const auto files = write_idx(3, 4, 5, 3);
    const DomainDataset d = load_idx(files.first, files.second);
    CHECK(d.size() == 3);
    CHECK(d.sample_shape() == Shape{1, 4, 5});
    CHECK(d.classes()[2] == 2);
    CHECK(d.inputs()[1] == 1.0f / 255.0f);
    const Tensor<float> y = d.one_hot();
    CHECK(y.at(1, 1) == 1.0f);
    CHECK(y.at(1, 0) == 0.0f);
  }

  TEST_CASE("IDX pixel 255 maps to exactly 1") {
    const auto files = write_idx(1, 16, 16, 1);  // pixel k = k, so pixel 255 is present
    const DomainDataset d = load_idx(files.first, files.second);
    CHECK(d.inputs()[255] == 1.0f);
  }

  TEST_CASE("IDX errors are distinct") {
    CHECK(load_error(write_idx(3, 4, 5, 3, 0x802)) == FormatError::Kind::kBadMagic);
    CHECK(load_error(write_idx(3, 4, 5, 2)) == FormatError::Kind::kDimensionMismatch);
    auto files = write_idx(3, 4, 5, 3);
    std::filesystem::resize_file(files.first, 16 + 3 * 20 - 7);
    CHECK(load_error(files) == FormatError::Kind::kTruncated);
    CHECK(load_error({"/nonexistent/images", "/nonexistent/labels"}) == FormatError::Kind::kIo);
  }

  TEST_CASE("bundled MNIST subset loads") {
    const std::string dir = CADP_TEST_DATA_DIR;
    const DomainDataset d = load_idx(dir + "/mnist5k-images-idx3-ubyte.gz", dir + "/mnist5k-labels-idx1-ubyte.gz");
    CHECK(d.size() == 5000);
    CHECK(d.sample_shape() == Shape{1, 28, 28});
    for (std::uint32_t k = 0; k < 10; ++k) CHECK(std::count(d.classes().begin(), d.classes().end(), k) == 500);
  }

  TEST_CASE("padding and channel broadcast") {
    const DomainDataset d(random_images(2, 1, 28, 28, 1), {3, 4}, 10, DomainTag::kSource);
    const DomainDataset p = pad_images(d, 32, 32);
    CHECK(p.sample_shape() == Shape{1, 32, 32});
    CHECK(p.inputs()[0] == 0.0f);
    CHECK(p.inputs()[2 * 32 + 2] == d.inputs()[0]);
    const DomainDataset b = broadcast_channels(p, 3);
    CHECK(b.sample_shape() == Shape{3, 32, 32});
    CHECK(b.inputs()[1024 + 66] == b.inputs()[66]);
    CHECK_THROWS_AS(broadcast_channels(b, 3), ShapeError);
  }

  TEST_CASE("colored target: labels kept, values in range, covariate shift present") {
    const DomainDataset d(random_images(50, 1, 16, 16, 2), std::vector<std::uint32_t>(50, 7), 10,
                          DomainTag::kSource);
    const DomainDataset t = synthesize_colored_target(d, 5);
    CHECK(t.classes() == d.classes());
    CHECK(t.sample_shape() == Shape{3, 16, 16});
    for (float v : t.inputs().vec()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(synthesize_colored_target(d, 5).inputs() == t.inputs());
    CHECK_FALSE(synthesize_colored_target(d, 6).inputs() == t.inputs());
    double shift = 0;
    for (std::size_t n = 0; n < 50; ++n) {
      double src = 0;
      for (std::size_t k = 0; k < 256; ++k) src += d.inputs()[n * 256 + k];
      src /= 256;
      for (std::size_t c = 0; c < 3; ++c) {
        double m = 0;
        for (std::size_t k = 0; k < 256; ++k) m += t.inputs()[(n * 3 + c) * 256 + k];
        shift += std::abs(m / 256 - src);
      }
    }
    CHECK(shift / 150 > 0.05);
    CHECK_THROWS_AS(synthesize_colored_target(t, 5), ShapeError);
  }

  TEST_CASE("instance normalization") {
    const Tensor<float> x = random_images(1, 3, 8, 8, 3);
    const Tensor<float> one({3, 8, 8}, std::vector<float>(x.vec()));
    const Tensor<float> y = instance_normalize(one);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (std::size_t k = 0; k < 64; ++k) m += y[c * 64 + k];
      m /= 64;
      for (std::size_t k = 0; k < 64; ++k) v += (y[c * 64 + k] - m) * (y[c * 64 + k] - m);
      CHECK(std::abs(m) <= 1e-6);
      CHECK(std::abs(std::sqrt(v / 64) - 1) <= 1e-4);
    }
    const Tensor<float> flat({1, 4, 4}, 0.7f);
    const Tensor<float> flat_n = instance_normalize(flat);
    for (float v : flat_n.vec()) CHECK(v == 0.0f);
    const Tensor<float> twice = instance_normalize(y);
    for (std::size_t k = 0; k < y.size(); ++k) CHECK(std::abs(twice[k] - y[k]) <= 1e-5);
  }

  TEST_CASE("batch iterator") {
    BatchIterator it(10, 3, 4);
    std::vector<std::size_t> seen;
    for (int i = 0; i < 4; ++i) {
      const auto b = it.next();
      CHECK(b.size() == 3);
      seen.insert(seen.end(), b.begin(), b.end());
    }
    std::vector<std::size_t> first(seen.begin(), seen.begin() + 10);
    std::sort(first.begin(), first.end());
    std::vector<std::size_t> all(10);
    std::iota(all.begin(), all.end(), std::size_t{0});
    CHECK(first == all);
    CHECK(it.epoch() == 1);

    BatchIterator again(10, 3, 4);
    for (int i = 0; i < 4; ++i) CHECK(again.next() == std::vector<std::size_t>(seen.begin() + 3 * i, seen.begin() + 3 * i + 3));

    BatchIterator resumed(10, 3, 4);
    resumed.seek(1, 2);
    CHECK(resumed.next() == it.next());
    CHECK_THROWS_AS(BatchIterator(3, 4, 0), ConfigError);
  }

  TEST_CASE("different seeds give different first batches") {
    int differ = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      BatchIterator a(10, 10, 2 * s), b(10, 10, 2 * s + 1);
      if (a.next() != b.next()) ++differ;
    }
    CHECK(differ == 100);
  }

  TEST_CASE("target views expose no labels; validation split") {
    MoonsConfig cfg;
    cfg.n_per_domain = 50;
    const MoonsPair m = make_moons_pair(cfg);
    const UnlabeledView v = m.target.unlabeled();
    CHECK(v.size() == 50);
    CHECK(v.tag() == DomainTag::kTarget);
    const ValidationSplit s = split_validation(m.target, 10, 1);
    CHECK(s.validation.size() == 10);
    CHECK(s.train.size() == 40);
    CHECK_THROWS_AS(split_validation(m.target, 50, 1), ConfigError);
  }

  TEST_CASE("dataset cache round trip") {
    MoonsConfig cfg;
    cfg.n_per_domain = 20;
    const MoonsPair m = make_moons_pair(cfg);
    const auto path = temp_path("cache.cadp");
    save_dataset(path.string(), m.target);
    const DomainDataset d = load_dataset(path.string());
    CHECK(d.inputs() == m.target.inputs());
    CHECK(d.classes() == m.target.classes());
    CHECK(d.tag() == DomainTag::kTarget);
    std::filesystem::remove(path);
  }
}
