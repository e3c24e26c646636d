#include <doctest.h>

#include <cmath>

#include "cadp/network.hpp"
#include "cadp/parallel.hpp"
#include "cadp/rng.hpp"

using namespace cadp;

namespace {

Tensor<double> random_tensor(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<double> t(s);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("mlp spec shapes and split") {
    const ArchitectureSpec s = mlp_spec({64, 64}, 2);
    s.validate();
    CHECK(s.layers.size() == 3);
    CHECK(s.feature_split_index == 0);
    CHECK(s.layer_shape(0) == Shape{64});
    CHECK(s.layer_shape(2) == Shape{2});
    CHECK(s.layer_from_end(0) == 2);
    CHECK_THROWS_AS(s.layer_from_end(3), ConfigError);
    CHECK_THROWS_AS(mlp_spec({}, 2), ConfigError);
  }

  TEST_CASE("small cnn spec") {
    const ArchitectureSpec s = small_cnn_spec(10, false, 1.0);
    s.validate();
    CHECK(s.input_shape == Shape{3, 32, 32});
    CHECK(s.layer_shape(s.layers.size() - 1) == Shape{10});
    CHECK(s.layer_shape(s.feature_split_index) == Shape{64, 8, 8});
    const ArchitectureSpec with_norm = small_cnn_spec(10, true, 1.0);
    CHECK(with_norm.layers.front().kind == LayerKind::kInstanceNorm);
    CHECK(with_norm.hash() != s.hash());
    CHECK(small_cnn_spec(10, false, 1.0).canonical() == s.canonical());
  }

  TEST_CASE("invalid specs are rejected") {
    ArchitectureSpec s = mlp_spec({8}, 2);
    s.feature_split_index = 5;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    ArchitectureSpec t = mlp_spec({8}, 2);
    t.layers.back().activation = Activation::kNone;
    CHECK_THROWS_AS(t.validate(), ConfigError);
  }

  TEST_CASE("parameter init: He-uniform weights, zero biases, unit batchnorm scale") {
    const ArchitectureSpec s = mlp_spec({32}, 2);
    const auto p = init_parameters<double>(s, 3);
    const auto& w = p.at("layer0.weight").value;
    const double bound = std::sqrt(2.0 / (1.0 + 0.01)) * std::sqrt(3.0 / 2.0);
    for (double v : w.vec()) CHECK(std::abs(v) <= bound);
    for (double v : p.at("layer0.bias").value.vec()) CHECK(v == 0);
    CHECK(p.parameter_count() == 2 * 32 + 32 + 32 * 2 + 2);
    const auto q = init_parameters<double>(s, 3);
    CHECK(q.at("layer0.weight").value == w);
    const auto cnn = init_parameters<float>(small_cnn_spec(10, false, 1.0), 0);
    CHECK(cnn.at("layer0.bn.gamma").value[0] == 1.0f);
    CHECK_FALSE(cnn.at("layer0.bn.running_var").trainable);
  }

  TEST_CASE("parameter store errors") {
    ParameterStore<double> s;
    s.add("a", Tensor<double>({2}));
    CHECK_THROWS_AS(s.add("a", Tensor<double>({2})), ConfigError);
    ParameterStore<double> t;
    t.add("a", Tensor<double>({3}));
    CHECK_FALSE(s.same_layout(t));
    CHECK_THROWS_AS(s.copy_values_from(t), ShapeError);
  }

  TEST_CASE("EMA algebra against a constant target") {
    ParameterStore<double> params;
    params.add("w", Tensor<double>({3}, 0.0));
    params.add("buf", Tensor<double>({1}, 0.0), false);
    EmaState<double> ema(params, 0.998);
    params.at("w").value.fill(2.5);
    params.at("buf").value.fill(7.0);
    for (int k = 1; k <= 1000; ++k) {
      ema_update(ema, params);
      if (k == 1 || k == 10 || k == 1000) {
        const double expect = 2.5 * (1.0 - std::pow(0.998, k));
        CHECK(std::abs(ema.shadow.at("w").value[1] - expect) <= 1e-6);
      }
    }
    CHECK(ema.shadow.at("buf").value[0] == 7.0);  // buffers are copied
    CHECK_THROWS_AS(EmaState<double>(params, 1.0), ConfigError);
  }

  TEST_CASE("graph forward agrees with chunked prediction and layer extraction") {
    const auto c = build_mlp<double>({16, 8}, 3, 4);
    const Tensor<double> x = random_tensor({37, 2}, 1);
    const Tensor<double> p = forward(c, x);
    const Tensor<double> q = predict(c.spec, c.params, x, 5);
    CHECK(p.shape() == Shape{37, 3});
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-14));
    for (std::size_t r = 0; r < 37; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += p.at(r, k);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(forward_layer(c.spec, c.params, x, -1, 7) == x);
    const Tensor<double> last = forward_layer(c.spec, c.params, x, 2, 7);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(last[i] == doctest::Approx(p[i]).epsilon(1e-14));
    const SplitOutput<double> split = forward_split(c, x);
    const Tensor<double> head = forward_head(c, split.features);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(head[i] == doctest::Approx(p[i]).epsilon(1e-14));
  }

  TEST_CASE("worker count does not change predictions") {
    const auto c = build_mlp<float>({32, 32}, 2, 9);
    const Tensor<float> x = random_tensor({1000, 2}, 2).cast<float>();
    const Tensor<float> a = predict(c.spec, c.params, x, 64);
    set_worker_threads(4);
    const Tensor<float> b = predict(c.spec, c.params, x, 64);
    set_worker_threads(1);
    CHECK(a == b);
  }

  TEST_CASE("cnn forward in eval mode is deterministic and row independent") {
    const auto c = build_small_cnn<float>(10, true, 1.0, 5);
    const Tensor<float> x = random_tensor({3, 3, 32, 32}, 3).cast<float>();
    const Tensor<float> p = forward(c, x);
    CHECK(p.shape() == Shape{3, 10});
    const std::vector<std::size_t> one{1};
    const Tensor<float> p1 = forward(c, x.gather_rows(one));
    for (std::size_t k = 0; k < 10; ++k) CHECK(p1[k] == doctest::Approx(p.at(1, k)).epsilon(1e-5));
  }

  TEST_CASE("equal stream keys give equal stochastic masks") {
    auto c = build_small_cnn<double>(10, false, 1.0, 5);
    const Tensor<double> x = random_tensor({2, 3, 32, 32}, 4);
    Graph<double> g;
    Var in = g.constant(x);
    BuildOptions a, b, other;
    a.stream_key = b.stream_key = 11;
    other.stream_key = 12;
    const auto na = build_network(c.spec, c.params, g, in, a);
    const auto nb = build_network(c.spec, c.params, g, in, b);
    const auto nc = build_network(c.spec, c.params, g, in, other);
    g.forward(Mode::kTrain, 3);
    CHECK(g.value(na.output) == g.value(nb.output));
    CHECK_FALSE(g.value(na.output) == g.value(nc.output));
  }

  TEST_CASE("discriminator outputs probabilities") {
    const auto d = build_discriminator<double>({64}, 1);
    CHECK(d.spec.layers.back().units == 1);
    const Tensor<double> p = predict(d.spec, d.params, random_tensor({10, 64}, 5));
    CHECK(p.shape() == Shape{10, 1});
    for (double v : p.vec()) CHECK((v > 0 && v < 1));
    const auto z = build_discriminator<double>({64}, 1, DiscriminatorInit::kZero);
    const Tensor<double> half = predict(z.spec, z.params, random_tensor({4, 64}, 6));
    for (double v : half.vec()) CHECK(v == 0.5);
  }
}
