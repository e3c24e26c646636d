#include <doctest.h>

#include <cmath>

#include "cadp/objectives.hpp"
#include "cadp/rng.hpp"

using namespace cadp;

namespace {

Tensor<double> random_tensor(const Shape& s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(s);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

Tensor<double> one_hot(std::size_t n, std::size_t k) {
  Tensor<double> y({n, k});
  for (std::size_t i = 0; i < n; ++i) y.at(i, i % k) = 1;
  return y;
}

double row_norm(const Tensor<double>& t, std::size_t r) {
  double s = 0;
  for (std::size_t k = 0; k < t.row_size(); ++k) s += t[r * t.row_size() + k] * t[r * t.row_size() + k];
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("objectives") {
  TEST_CASE("analytic identities") {
    for (std::size_t k : {2u, 3u, 10u}) {
      Tensor<double> u({1, k}, 1.0 / static_cast<double>(k));
      CHECK(std::abs(conditional_entropy(u) - std::log(static_cast<double>(k))) <= 1e-6);
      CHECK(std::abs(kl_mean(u, u)) <= 1e-6);
    }
    CHECK(std::abs(conditional_entropy(one_hot(4, 3))) <= 1e-6);
    const double p[] = {1.0, 0.0}, q[] = {0.5, 0.5};
    CHECK(std::abs(kl_categorical(p, q) - std::log(2.0)) <= 1e-6);
    const std::vector<double> half(8, 0.5);
    for (auto form : {EncoderLoss::kNonSaturating, EncoderLoss::kSaturating}) {
      const auto [disc, enc] = discriminator_losses(half, half, form);
      CHECK(std::abs(disc - 2 * std::log(2.0)) <= 1e-6);
      if (form == EncoderLoss::kNonSaturating) CHECK(std::abs(enc - 2 * std::log(2.0)) <= 1e-6);
      if (form == EncoderLoss::kSaturating) CHECK(std::abs(enc + 2 * std::log(2.0)) <= 1e-6);
    }
  }

  TEST_CASE("cross entropy of a perfect and a uniform prediction") {
    CHECK(cross_entropy(one_hot(5, 4), one_hot(5, 4)) == doctest::Approx(0.0));
    CHECK(cross_entropy(Tensor<double>({5, 4}, 0.25), one_hot(5, 4)) == doctest::Approx(std::log(4.0)));
    CHECK_THROWS_AS(cross_entropy(one_hot(5, 4), one_hot(5, 3)), ShapeError);
  }

  TEST_CASE("log floor keeps losses finite at zero probabilities") {
    Tensor<double> p({1, 2}, {1.0, 0.0});
    Tensor<double> y({1, 2}, {0.0, 1.0});
    CHECK(cross_entropy(p, y) == doctest::Approx(-std::log(kLogFloor)));
    CHECK(std::isfinite(kl_mean(y, p)));
  }

  TEST_CASE("graph losses equal value losses") {
    const Tensor<double> p = predict(mlp_spec({4}, 3), init_parameters<double>(mlp_spec({4}, 3), 1),
                                     random_tensor({6, 2}, 2));
    const Tensor<double> q = predict(mlp_spec({4}, 3), init_parameters<double>(mlp_spec({4}, 3), 2),
                                     random_tensor({6, 2}, 2));
    Graph<double> g;
    Var vp = g.constant(p), vq = g.constant(q), vy = g.constant(one_hot(6, 3));
    Var ce = cross_entropy(g, vp, vy);
    Var h = conditional_entropy(g, vp);
    Var kl = kl_mean(g, vp, vq);
    g.forward(Mode::kTrain, 0);
    CHECK(g.scalar(ce) == doctest::Approx(cross_entropy(p, one_hot(6, 3))).epsilon(1e-12));
    CHECK(g.scalar(h) == doctest::Approx(conditional_entropy(p)).epsilon(1e-12));
    CHECK(g.scalar(kl) == doctest::Approx(kl_mean(p, q)).epsilon(1e-12));
    CHECK(kl_mean(p, q) > 0);
  }

  TEST_CASE("weights and vat config validation") {
    LossWeights w;
    w.lambda_s = -1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
    VatConfig v;
    v.epsilon = 0;
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = VatConfig{};
    v.power_iterations = 0;
    CHECK_THROWS_AS(v.validate(), ConfigError);
  }

  TEST_CASE("vat perturbation: per-row radius, determinism, no side effects") {
    auto c = build_small_cnn<double>(10, false, 1.0, 3);
    const Tensor<double> x = random_tensor({3, 3, 32, 32}, 4, 0.3);
    ParameterStore<double> before = c.params;
    VatConfig cfg;
    cfg.epsilon = 2.0;
    const auto a = vat_perturbation(c, x, cfg, 7);
    const auto b = vat_perturbation(c, x, cfg, 7);
    CHECK(a.r == b.r);
    CHECK(a.fallback_rows == 0);
    for (std::size_t r = 0; r < 3; ++r) CHECK(row_norm(a.r, r) == doctest::Approx(2.0).epsilon(1e-9));
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      CHECK(c.params.entry(i).param.value == before.entry(i).param.value);  // running stats untouched
    }
    const auto other = vat_perturbation(c, x, cfg, 8);
    CHECK_FALSE(other.r == a.r);
  }

  TEST_CASE("vat perturbation increases the KL over a random direction") {
    auto c = build_mlp<double>({32, 32}, 2, 5);
    const Tensor<double> x = random_tensor({64, 2}, 6);
    VatConfig cfg;
    cfg.epsilon = 0.2;
    const auto adv = vat_perturbation(c, x, cfg, 1);
    Tensor<double> rnd = random_tensor({64, 2}, 7);
    for (std::size_t r = 0; r < 64; ++r) {
      const double n = row_norm(rnd, r);
      for (std::size_t k = 0; k < 2; ++k) rnd[r * 2 + k] *= 0.2 / n;
    }
    CHECK(vat_loss(c, x, adv.r) > vat_loss(c, x, rnd));
  }

  TEST_CASE("vada breakdown: totals, switches and discriminator requirement") {
    auto c = build_mlp<double>({8, 8}, 2, 1);
    auto d = build_discriminator<double>(c.spec.layer_shape(c.spec.feature_split_index), 2);
    const Tensor<double> xs = random_tensor({8, 2}, 3), xt = random_tensor({8, 2}, 4);
    LossWeights w;
    VatConfig vat;
    vat.epsilon = 0.1;
    ObjectiveOptions opt;
    opt.update_stats = false;
    const LossBreakdown b = vada_objective(c, &d, xs, one_hot(8, 2), xt, w, vat, 1, opt);
    CHECK(b.total == doctest::Approx(vada_total(b, w)).epsilon(1e-12));
    CHECK(b.l_d_disc > 0);
    CHECK(b.l_v_src > 0);
    w.target_entropy = false;
    const LossBreakdown no_c = vada_objective(c, &d, xs, one_hot(8, 2), xt, w, vat, 1, opt);
    // l_c is still reported but leaves the total.
    CHECK(no_c.l_c == doctest::Approx(b.l_c).epsilon(1e-12));
    CHECK(no_c.total == doctest::Approx(b.total - w.lambda_t * b.l_c).epsilon(1e-12));
    CHECK(std::abs(no_c.total - vada_total(no_c, w)) <= 1e-6);
    LossWeights src_only;
    src_only.lambda_d = src_only.lambda_s = src_only.lambda_t = 0;
    const LossBreakdown so = vada_objective<double>(c, nullptr, xs, one_hot(8, 2), xt, src_only, vat, 1, opt);
    CHECK(so.total == doctest::Approx(so.l_y));
    CHECK(so.l_d_disc == 0);
    CHECK_THROWS_AS(VadaObjective<double>(c, nullptr, LossWeights{}, vat, opt), ConfigError);
  }

  TEST_CASE("discriminator update leaves classifier gradients alone and vice versa") {
    auto c = build_mlp<double>({8, 8}, 2, 1);
    auto d = build_discriminator<double>(c.spec.layer_shape(c.spec.feature_split_index), 2);
    const Tensor<double> xs = random_tensor({8, 2}, 3), xt = random_tensor({8, 2}, 4);
    VatConfig vat;
    vat.epsilon = 0.1;
    VadaObjective<double> obj(c, &d, LossWeights{}, vat);
    obj.evaluate(xs, one_hot(8, 2), xt, 0);
    for (auto& e : c.params) e.param.grad.fill(0);
    obj.backward_discriminator();
    for (const auto& e : c.params)
      for (double v : e.param.grad.vec()) CHECK(v == 0);
    double disc_norm = 0;
    for (const auto& e : d.params)
      for (double v : e.param.grad.vec()) disc_norm += v * v;
    CHECK(disc_norm > 0);
    for (auto& e : d.params) e.param.grad.fill(0);
    obj.backward_total();
    for (const auto& e : d.params)
      for (double v : e.param.grad.vec()) CHECK(v == 0);
  }

  TEST_CASE("refresh_encoder sees an updated discriminator") {
    auto c = build_mlp<double>({8, 8}, 2, 1);
    auto d = build_discriminator<double>(c.spec.layer_shape(c.spec.feature_split_index), 2);
    const Tensor<double> xs = random_tensor({8, 2}, 3), xt = random_tensor({8, 2}, 4);
    VatConfig vat;
    vat.epsilon = 0.1;
    VadaObjective<double> obj(c, &d, LossWeights{}, vat);
    const LossBreakdown first = obj.evaluate(xs, one_hot(8, 2), xt, 0);
    for (auto& e : d.params)
      for (auto& v : e.param.value.data()) v *= 1.5;
    const LossBreakdown second = obj.refresh_encoder();
    CHECK(second.l_d_enc != first.l_d_enc);
    CHECK(second.l_y == first.l_y);
    CHECK(second.l_d_disc == first.l_d_disc);
  }

  TEST_CASE("dirt-t: teacher never receives gradient, beta = 0 drops the KL") {
    auto student = build_mlp<double>({8, 8}, 2, 1);
    auto teacher = build_mlp<double>({8, 8}, 2, 2);
    const ParameterStore<double> teacher_before = teacher.params;
    const Tensor<double> xt = random_tensor({8, 2}, 4);
    LossWeights w;
    VatConfig vat;
    vat.epsilon = 0.1;
    DirttObjective<double> obj(student, teacher, w, vat);
    const LossBreakdown b = obj.evaluate(xt, 3);
    obj.backward_total();
    CHECK(b.l_kl_teacher == doctest::Approx(kl_mean(forward(teacher, xt), forward(student, xt))).epsilon(1e-10));
    CHECK(b.total == doctest::Approx(dirtt_total(b, w)).epsilon(1e-12));
    for (std::size_t i = 0; i < teacher.params.size(); ++i) {
      CHECK(teacher.params.entry(i).param.value == teacher_before.entry(i).param.value);
      for (double v : teacher.params.entry(i).param.grad.vec()) CHECK(v == 0);
    }
    w.beta = 0;
    const LossBreakdown nb = dirtt_objective(student, teacher, xt, w, vat, 3);
    CHECK(nb.total == doctest::Approx(w.lambda_t * (nb.l_v_tgt + nb.l_c)).epsilon(1e-12));
  }

  TEST_CASE("target cluster loss of a confident model is small") {
    auto c = build_mlp<double>({8}, 2, 1);
    for (auto& v : c.params.at("layer1.weight").value.data()) v *= 100;
    const Tensor<double> x = random_tensor({32, 2}, 5);
    VatConfig vat;
    vat.epsilon = 1e-3;
    const TargetClusterLoss l = target_cluster_loss(c, x, vat);
    CHECK(l.l_c < 0.2);
    CHECK(l.l_v >= 0);
    CHECK(l.total == doctest::Approx(l.l_v + l.l_c));
  }
}
