#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "cadp/config.hpp"
#include "cadp/diagnostics.hpp"
#include "cadp/rng.hpp"

using namespace cadp;

namespace {

Tensor<double> gaussian(std::size_t n, std::size_t d, double mean, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor<double> t({n, d});
  for (auto& v : t.data()) v = mean + g(rng);
  return t;
}

// A classifier whose output ignores the input: zero weights everywhere.
Classifier<float> constant_model(std::size_t k) {
  auto c = build_mlp<float>({4}, k, 0);
  for (auto& e : c.params) e.param.value.fill(0.0f);
  return c;
}

}  // namespace

TEST_SUITE("diagnostics") {
  TEST_CASE("argmax ties go to the lowest index") {
    Tensor<double> p({2, 3}, {0.4, 0.4, 0.2, 0.1, 0.3, 0.3});
    CHECK(argmax_rows(p) == std::vector<std::uint32_t>{0, 1});
  }

  TEST_CASE("evaluate: uniform ten-class model sits near chance") {
    Rng rng(3);
    std::uniform_int_distribution<std::uint32_t> cls(0, 9);
    std::vector<std::uint32_t> labels(10000);
    for (auto& l : labels) l = cls(rng);
    const DomainDataset d(Tensor<float>({10000, 2}, 0.5f), labels, 10, DomainTag::kTarget);
    const auto c = constant_model(10);
    const EvalReport r = evaluate(c.spec, c.params, d, WeightsUsed::kRaw);
    // Ties make every prediction class 0; its frequency is binomial(10000, 0.1).
    CHECK((r.accuracy >= 0.05 && r.accuracy <= 0.15));
    CHECK(r.accuracy + r.error() == 1.0);
    CHECK(r.accuracy == static_cast<double>(r.correct) / static_cast<double>(r.count));
    CHECK(r.mean_entropy == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    CHECK(r.weights == WeightsUsed::kRaw);
    CHECK(r.dataset == "target");
  }

  TEST_CASE("evaluate: perfect predictions and order invariance") {
    MoonsConfig mc;
    mc.n_per_domain = 300;
    const MoonsPair m = make_moons_pair(mc);
    auto c = build_mlp<float>({16}, 2, 1);
    const EvalReport r = evaluate(c.spec, c.params, m.source, WeightsUsed::kEma);
    std::vector<std::size_t> perm(m.source.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::reverse(perm.begin(), perm.end());
    const EvalReport q = evaluate(c.spec, c.params, m.source.subset(perm), WeightsUsed::kEma);
    CHECK(q.correct == r.correct);
    CHECK(q.mean_entropy == doctest::Approx(r.mean_entropy).epsilon(1e-9));
    CHECK(r.mean_entropy >= 0);
    CHECK(r.mean_entropy <= std::log(2.0) + 1e-9);

    // Relabel the data with the model's own predictions: accuracy is exactly 1.
    const auto pred = argmax_rows(predict(c.spec, c.params, m.source.inputs()));
    const DomainDataset self(m.source.inputs(), pred, 2, DomainTag::kSource);
    CHECK(evaluate(c.spec, c.params, self, WeightsUsed::kEma).accuracy == 1.0);
    CHECK_THROWS_AS(DomainDataset(Tensor<float>({0, 2}), {}, 2, DomainTag::kSource), ConfigError);
  }

  TEST_CASE("jsd probe: identical, separated and clamping") {
    const Tensor<double> a = gaussian(2000, 4, 0.0, 1);
    const JsdProbeReport same = jsd_lower_bound(a, a);
    CHECK(same.bound <= 0.02);
    const JsdProbeReport far = jsd_lower_bound(gaussian(1000, 4, 0.0, 2), gaussian(1000, 4, 10.0, 3));
    CHECK(far.bound >= 0.65);
    CHECK(far.bound <= std::numbers::ln2);
    CHECK(far.bound_unclamped <= std::numbers::ln2 + 1e-6);
    CHECK(far.heldout_accuracy > 0.99);
    CHECK(far.n_source == far.n_target);
    CHECK(far.to_json().find("\"jsd_lower_bound\":") != std::string::npos);
    CHECK_THROWS_AS(jsd_lower_bound(gaussian(9, 2, 0, 1), gaussian(20, 2, 0, 1)), ConfigError);
    CHECK_THROWS_AS(jsd_lower_bound(gaussian(20, 2, 0, 1), gaussian(20, 3, 0, 1)), ShapeError);
  }

  TEST_CASE("jsd probe balances unequal domains") {
    const JsdProbeReport r = jsd_lower_bound(gaussian(300, 2, 0.0, 4), gaussian(50, 2, 0.0, 5));
    CHECK(r.n_source == 50);
    CHECK(r.n_target == 50);
  }

  TEST_CASE("layer ids") {
    const auto spec = mlp_spec({8, 8}, 2);
    CHECK(parse_layer_id(spec, "input") == -1);
    CHECK(parse_layer_id(spec, "L-0") == 2);
    CHECK(parse_layer_id(spec, "L-2") == 0);
    CHECK(layer_id(spec, 1) == "L-1");
    CHECK_THROWS(parse_layer_id(spec, "L-3"));
    CHECK_THROWS(parse_layer_id(spec, "conv1"));
  }

  TEST_CASE("layer sweep") {
    MoonsConfig mc;
    mc.n_per_domain = 200;
    mc.rotation_degrees = 0;
    const MoonsPair m = make_moons_pair(mc);
    auto c = build_mlp<float>({8, 8}, 2, 1);
    const LayerSweep s = layer_probe_sweep(c.spec, c.params, m.source, m.target, {"input", "L-1", "L-0"});
    CHECK(s.probes.size() == 3);
    CHECK(s.probes[0].layer == "input");
    CHECK(s.probes[0].bound <= 0.02);
    CHECK(s.target.count == 200);
    CHECK_THROWS(layer_probe_sweep(c.spec, c.params, m.source, m.target, {"L-9"}));
  }

  TEST_CASE("decision grid export") {
    auto c = build_mlp<float>({8}, 2, 1);
    std::ostringstream out;
    export_decision_grid(c.spec, c.params, GridBounds{}, 7, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "x0,x1,p_class0,p_class1");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::stringstream ss(line);
      std::string cell;
      std::vector<double> v;
      while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
      REQUIRE(v.size() == 4);
      CHECK(std::abs(v[2] + v[3] - 1) <= 1e-5);
    }
    CHECK(rows == 49);

    const auto k = constant_model(3);
    std::ostringstream flat;
    export_decision_grid(k.spec, k.params, GridBounds{}, 3, flat);
    CHECK(flat.str().find("0.333333") != std::string::npos);
    std::istringstream fin(flat.str());
    std::getline(fin, line);
    std::set<std::string> tails;
    while (std::getline(fin, line)) {
      std::size_t pos = 0;
      for (int i = 0; i < 2; ++i) pos = line.find(',', pos) + 1;
      tails.insert(line.substr(pos));
    }
    CHECK(tails.size() == 1);

    CHECK_THROWS(export_decision_grid(k.spec, k.params, GridBounds{}, 1, flat));
    auto cnn = build_small_cnn<float>(10, false, 1.0);
    CHECK_THROWS(export_decision_grid(cnn.spec, cnn.params, GridBounds{}, 3, flat));
  }

  TEST_CASE("confusion matrix") {
    const std::vector<std::uint32_t> a{0, 1, 2, 2, 1}, b{0, 2, 2, 1, 1};
    const ConfusionMatrix m = confusion_matrix(a, b, 3);
    CHECK(m.total() == 5);
    CHECK(m.at(1, 2) == 1);
    CHECK(m.at(2, 1) == 1);
    const ConfusionMatrix t = confusion_matrix(b, a, 3);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(t.at(i, j) == m.at(j, i));
    const ConfusionMatrix same = confusion_matrix(a, a, 3);
    CHECK(same.trace() == 5);
    CHECK(same.at(0, 1) == 0);
    CHECK_THROWS(confusion_matrix(a, {0, 1}, 3));
  }

  TEST_CASE("toml parsing") {
    const KeyValues kv = parse_toml(
        "# comment\n"
        "mode = \"vada\"  # trailing\n"
        "iterations = 10\n"
        "[weights]\n"
        "lambda_d = 1e-2\n"
        "[arch]\n"
        "widths = [32, 16]\n"
        "kind = 'mlp'\n");
    CHECK(kv.at("mode") == "vada");
    CHECK(kv.at("iterations") == "10");
    CHECK(kv.at("weights.lambda_d") == "1e-2");
    CHECK(kv.at("arch.widths") == "32,16");
    CHECK(kv.at("arch.kind") == "mlp");
    CHECK_THROWS_AS(parse_toml("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml("a = \"unterminated\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml("[bad\n"), ConfigError);
    const KeyValues back = parse_toml(format_toml(kv));
    CHECK(back == kv);
  }

  TEST_CASE("json parsing matches toml") {
    const KeyValues a = parse_json(R"({"mode":"vada","weights":{"lambda_d":0.01},"arch":{"widths":[32,16]}})");
    CHECK(a.at("mode") == "vada");
    CHECK(std::stod(a.at("weights.lambda_d")) == 0.01);
    CHECK(a.at("arch.widths") == "32,16");
    CHECK_THROWS_AS(parse_json("{"), ConfigError);
  }

  TEST_CASE("experiment config: defaults, unknown keys and round trip") {
    const ExperimentConfig d = ExperimentConfig::from_map({});
    CHECK(d.dataset == DatasetKind::kMoons);
    CHECK(d.train.weights.lambda_d == 1e-2);
    CHECK(d.train.weights.lambda_s == 1.0);
    CHECK(d.train.adam.beta1 == 0.5);
    CHECK(d.train.ema_momentum == 0.998);
    CHECK_THROWS_AS(ExperimentConfig::from_map({{"weights.lambda_x", "1"}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_map({{"iterations", "ten"}}), ConfigError);
    const ExperimentConfig r = ExperimentConfig::from_map(d.to_map());
    CHECK(r.to_map() == d.to_map());
    ExperimentConfig bad = d;
    bad.arch.kind = "small-cnn";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("full budgets fix adaptation and refinement lengths") {
    const ExperimentConfig f = ExperimentConfig::from_map({{"budget", "full-40k"}, {"iterations", "10"}});
    CHECK(f.train.iterations == 80000);
    CHECK(f.refine_iterations == 40000);
    CHECK(ExperimentConfig::from_map(f.to_map()).to_map() == f.to_map());
    CHECK_THROWS_AS(ExperimentConfig::from_map({{"budget", "full-30k"}}), ConfigError);
  }

  TEST_CASE("presets: table rows and override order") {
    const Preset& p = find_preset("mnist-svhn-no-inorm");
    CHECK(std::stod(p.overrides.at("weights.beta")) == 1e-3);
    CHECK(p.overrides.at("weights.target_entropy") == "false");
    CHECK(std::stod(find_preset("mnist-mnistm").overrides.at("refinement_interval")) == 500);
    CHECK(std::stod(find_preset("cifar-stl").overrides.at("weights.lambda_d")) == 0);
    const Preset& def = find_preset("paper-default");
    CHECK(std::stod(def.overrides.at("weights.lambda_d")) == 1e-2);
    CHECK(std::stod(def.overrides.at("weights.lambda_s")) == 1);
    CHECK(std::stod(def.overrides.at("weights.lambda_t")) == 1e-2);
    CHECK(std::stod(def.overrides.at("weights.beta")) == 1e-2);
    CHECK_THROWS_AS(find_preset("nope"), ConfigError);
    std::size_t table_rows = 0;
    for (const auto& q : presets()) table_rows += q.from_table;
    CHECK(table_rows >= 9);

    const ExperimentConfig e = load_experiment(std::nullopt, std::string("moons-desk"), {{"weights.lambda_t", "0.5"}});
    CHECK(e.train.weights.lambda_t == 0.5);
    CHECK(e.preset == "moons-desk");
  }
}
