#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "cadp/gradcheck.hpp"
#include "cadp/graph.hpp"
#include "cadp/oracle_suite.hpp"
#include "cadp/parallel.hpp"

using namespace cadp;

TEST_SUITE("autodiff") {
  TEST_CASE("tensor basics") {
    CHECK(numel({}) == 1);
    CHECK(numel({2, 3, 4}) == 24);
    Tensor<double> t({3, 2}, std::vector<double>{0, 1, 2, 3, 4, 5});
    CHECK(t.row_size() == 2);
    const Tensor<double> s = t.slice_rows(1, 3);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s[0] == 2);
    const std::vector<std::size_t> rows{2, 0};
    const Tensor<double> g = t.gather_rows(rows);
    CHECK(g[0] == 4);
    CHECK(g[3] == 1);
    CHECK(t.cast<float>().cast<double>() == t);
    t[1] = std::nan("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(Tensor<double>({2}, std::vector<double>{1, 2, 3}), ShapeError);
  }

  TEST_CASE("forward values of primitives") {
    Graph<double> g;
    Var a = g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    Var b = g.constant(Tensor<double>({2}, {10, 20}));
    Var c = g.constant(Tensor<double>({1}, {-1}));
    Var row = g.add(a, b);
    Var all = g.add(a, c);
    Var mm = g.matmul(a, a);
    Var sm = g.softmax(g.constant(Tensor<double>({1, 3}, {0, 0, 0})));
    Var ls = g.log_softmax(g.constant(Tensor<double>({1, 2}, {0, 0})));
    Var lg = g.log(g.constant(Tensor<double>({2}, {0, 1})));
    g.forward(Mode::kTrain, 0);
    CHECK(g.value(row)[3] == 24);
    CHECK(g.value(all)[0] == 0);
    CHECK(g.value(mm)[0] == 7);
    CHECK(g.value(mm)[3] == 22);
    CHECK(g.value(sm)[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    CHECK(g.value(ls)[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    CHECK(g.value(lg)[0] == doctest::Approx(std::log(kLogFloor)).epsilon(1e-15));
    CHECK(g.value(lg)[1] == 0);
  }

  TEST_CASE("conv3x3 uses same padding") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
    Var w = g.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
    Var y = g.conv3x3(x, w);
    g.forward(Mode::kEval, 0);
    const auto& v = g.value(y);
    CHECK(v.shape() == Shape{1, 1, 3, 3});
    CHECK(v[0] == 4);  // corner sees a 2x2 window
    CHECK(v[1] == 6);
    CHECK(v[4] == 9);
  }

  TEST_CASE("usage and shape errors") {
    {
      Graph<double> bad;
      Var x = bad.input({2, 3});
      CHECK_THROWS_AS(bad.matmul(x, bad.input({2, 3})), ShapeError);
      CHECK_THROWS_AS(bad.add(x, bad.input({2})), ShapeError);
    }
    Graph<double> g;
    Var x = g.input({2, 3});
    CHECK_THROWS_AS(g.forward(Mode::kTrain, 0), UsageError);  // x unbound
    g.bind(x, Tensor<double>({2, 3}, 1.0));
    CHECK_THROWS_AS(g.bind(x, Tensor<double>({3, 2}, 1.0)), ShapeError);
    Var s = g.sum(x);
    CHECK_THROWS_AS(g.backward(s), UsageError);  // no forward yet
    g.forward(Mode::kTrain, 0);
    CHECK_THROWS_AS(g.backward(x), UsageError);  // non-scalar root
    CHECK_THROWS_AS(g.dropout(x, 1.0, 1), UsageError);
  }

  TEST_CASE("non-finite forward values raise NumericalError naming the node") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({1}, {1e308}));
    Var y = g.scale(x, 1e10);
    g.sum(y);
    try {
      g.forward(Mode::kTrain, 0);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(e.node() == y.id);
    }
  }

  TEST_CASE("parameter gradients and detach") {
    Parameter<double> w(Tensor<double>({2}, {1.5, -2.0}));
    Graph<double> g;
    Var p = g.parameter(w);
    CHECK(g.parameter(w).id == p.id);
    Var y = g.mul(p, g.detach(p));  // d/dw (w * stop(w)) = stop(w)
    Var loss = g.sum(y);
    g.forward(Mode::kTrain, 0);
    g.backward(loss);
    CHECK(w.grad[0] == 1.5);
    CHECK(w.grad[1] == -2.0);
    // A second backward overwrites rather than accumulates.
    g.backward(loss);
    CHECK(w.grad[0] == 1.5);
  }

  TEST_CASE("non-trainable parameter references receive no gradient") {
    Parameter<double> w(Tensor<double>({2}, {1, 2}));
    Graph<double> g;
    Var p = g.parameter(w, false);
    Var loss = g.sum(g.scale(p, 3.0));
    g.forward(Mode::kTrain, 0);
    g.backward(loss);
    CHECK(w.grad[0] == 0);
    CHECK(w.grad[1] == 0);
  }

  TEST_CASE("dropout: equal streams give equal masks, eval is identity") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({4, 50}, 1.0));
    Var a = g.dropout(x, 0.5, 7);
    Var b = g.dropout(x, 0.5, 7);
    Var c = g.dropout(x, 0.5, 8);
    g.forward(Mode::kTrain, 3);
    CHECK(g.value(a) == g.value(b));
    CHECK_FALSE(g.value(a) == g.value(c));
    for (double v : g.value(a).vec()) CHECK((v == 0.0 || v == 2.0));
    g.forward(Mode::kEval, 3);
    CHECK(g.value(a) == g.value(x));
  }

  TEST_CASE("gaussian noise: identity in eval, seeded in train") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({3, 4}, 0.0));
    Var n = g.gaussian_noise(x, 1.0, 1);
    g.forward(Mode::kEval, 0);
    CHECK(g.value(n) == g.value(x));
    g.forward(Mode::kTrain, 5);
    const Tensor<double> first = g.value(n);
    g.forward(Mode::kTrain, 5);
    CHECK(g.value(n) == first);
    g.forward(Mode::kTrain, 6);
    CHECK_FALSE(g.value(n) == first);
  }

  TEST_CASE("batchnorm running statistics") {
    Parameter<double> rm(Tensor<double>({2}, 0.0), false), rv(Tensor<double>({2}, 1.0), false);
    Graph<double> g;
    Var x = g.constant(Tensor<double>({2, 2}, {1, 10, 3, 30}));
    Var gamma = g.constant(Tensor<double>({2}, 1.0));
    Var beta = g.constant(Tensor<double>({2}, 0.0));
    Var y = g.batchnorm(x, gamma, beta, rm, rv, true);
    g.forward(Mode::kTrain, 0);
    // Batch mean (2, 20); unbiased variance (2, 200).
    CHECK(rm.value[0] == doctest::Approx(0.01 * 2));
    CHECK(rm.value[1] == doctest::Approx(0.01 * 20));
    CHECK(rv.value[0] == doctest::Approx(0.99 + 0.01 * 2));
    CHECK(rv.value[1] == doctest::Approx(0.99 + 0.01 * 200));
    CHECK(g.value(y)[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + kBatchNormEps)));
    const Tensor<double> before = rm.value;
    g.forward(Mode::kEval, 0);
    CHECK(rm.value == before);
    CHECK(g.value(y)[1] == doctest::Approx((10 - rm.value[1]) / std::sqrt(rv.value[1] + kBatchNormEps)));
  }

  TEST_CASE("force_eval keeps a branch deterministic in train mode") {
    Graph<double> g;
    Var x = g.constant(Tensor<double>({2, 8}, 1.0));
    Var d = g.dropout(x, 0.5, 1);
    g.force_eval(d);
    g.forward(Mode::kTrain, 9);
    CHECK(g.value(d) == g.value(x));
  }

  TEST_CASE("partial re-evaluation from a mark") {
    Parameter<double> w(Tensor<double>({1}, {2.0}));
    Graph<double> g;
    Var x = g.constant(Tensor<double>({1}, {3.0}));
    Var h = g.mul(x, g.parameter(w));
    const std::size_t mark = g.mark();
    Var out = g.scale(h, 2.0);
    g.forward(Mode::kTrain, 0);
    CHECK(g.scalar(out) == 12);
    w.value[0] = 5.0;  // nodes before the mark keep their cached values
    g.forward(Mode::kTrain, 0, mark);
    CHECK(g.scalar(out) == 12);
    g.forward(Mode::kTrain, 0);
    CHECK(g.scalar(out) == 30);
  }

  TEST_CASE("finite differences reject non-deterministic losses") {
    Tensor<double> v({2}, {0.5, 1.0});
    std::vector<GradientProbe<double>> probes{{"v", &v}};
    int calls = 0;
    auto loss = [&] { return v[0] * v[0] + 1e-3 * (++calls); };
    CHECK_THROWS_AS(finite_difference_gradient<double>(loss, probes, 1e-6), OracleError);
  }

  TEST_CASE("finite differences of a quadratic and the relative error definition") {
    Tensor<double> v({3}, {0.5, -1.0, 2.0});
    std::vector<GradientProbe<double>> probes{{"v", &v}};
    auto loss = [&] { return v[0] * v[0] + 3 * v[1] + v[2] * v[2] * v[2]; };
    const auto est = finite_difference_gradient<double>(loss, probes, 1e-5);
    CHECK(est[0][0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(est[0][1] == doctest::Approx(3.0).epsilon(1e-8));
    CHECK(est[0][2] == doctest::Approx(12.0).epsilon(1e-8));
    CHECK(v[2] == 2.0);  // restored
    std::vector<Tensor<double>> analytic{Tensor<double>({3}, {1.0, 3.0, 12.0 + 0.12})};
    const auto rep = compare_gradients(probes, analytic, est, 1e-3);
    // max |a - n| / max(|a|_inf, |n|_inf) = 0.12 / 12.12
    CHECK(rep.max_relative_error == doctest::Approx(0.12 / 12.12).epsilon(1e-6));
    CHECK_FALSE(rep.pass);
  }

  TEST_CASE("oracle suite covers every operation kind") {
    const auto names = oracle_case_names();
    const std::set<std::string> have(names.begin(), names.end());
    // Case names use short forms for a few kinds.
    const std::map<OpKind, std::string> case_for{{OpKind::kConv2d3x3, "conv3x3"},
                                                 {OpKind::kMaxPool2x2, "maxpool2x2"},
                                                 {OpKind::kMul, "mul"},
                                                 {OpKind::kParameter, "matmul"},
                                                 {OpKind::kDropout, "dropout-train"},
                                                 {OpKind::kBatchNorm, "batchnorm-train-rank4"}};
    for (int k = 0; k <= static_cast<int>(OpKind::kDetach); ++k) {
      const auto kind = static_cast<OpKind>(k);
      const std::string name = case_for.count(kind) ? case_for.at(kind) : std::string(op_name(kind));
      CHECK_MESSAGE(have.count(name) == 1, name);
    }
    for (const char* obj : {"cross-entropy", "conditional-entropy", "vat-kl", "domain-disc-side",
                            "domain-enc-side-nonsaturating", "domain-enc-side-saturating", "vada-total", "dirtt-total"}) {
      CHECK(have.count(obj) == 1);
    }
  }

  TEST_CASE("double-precision oracle suite passes") {
    const auto rep = run_gradient_oracle_suite(Precision::kDouble, 1);
    for (const auto& c : rep.cases) CHECK_MESSAGE(c.pass, c.name << " err=" << c.max_relative_error << " " << c.detail);
  }

  TEST_CASE("parallel_for runs every index once and rethrows") {
    set_worker_threads(4);
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                      if (i == 3) throw UsageError("x");
                    }),
                    UsageError);
    set_worker_threads(1);
  }
}
