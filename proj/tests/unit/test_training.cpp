#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cadp/array_io.hpp"
#include "cadp/training.hpp"

using namespace cadp;

namespace {

TrainConfig small_config(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.iterations = 20;
  c.batch_size = 16;
  c.log_every = 5;
  c.vat.epsilon = 0.1;
  c.vat.xi = 1e-3;
  c.seed = 3;
  c.refinement_interval = 4;
  return c;
}

MoonsPair small_moons() {
  MoonsConfig m;
  m.n_per_domain = 100;
  return make_moons_pair(m);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cadp_unit_" + name);
}

template <typename T>
bool same_values(const ParameterStore<T>& a, const ParameterStore<T>& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a.entry(i).param.value == b.entry(i).param.value)) return false;
  return true;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("adam defaults") {
    AdamConfig a;
    CHECK(a.learning_rate == 1e-3);
    CHECK(a.beta1 == 0.5);
    CHECK(a.beta2 == 0.999);
  }

  TEST_CASE("first adam step moves each coordinate by about lr against the gradient sign") {
    ParameterStore<double> p;
    p.add("w", Tensor<double>({4}, 1.0));
    AdamState<double> st(p, AdamConfig{});
    const double g[] = {3.0, -0.01, 250.0, -7.0};
    for (int k = 0; k < 4; ++k) p.at("w").grad[k] = g[k];
    adam_step(st, p);
    for (int k = 0; k < 4; ++k) {
      const double step = 1.0 - p.at("w").value[k];
      CHECK(std::abs(std::abs(step) - 1e-3) <= 1e-5);
      CHECK((step > 0) == (g[k] > 0));
    }
    CHECK(st.t == 1);
  }

  TEST_CASE("adam minimizes a quadratic") {
    ParameterStore<double> p;
    p.add("theta", Tensor<double>({1}, 1.0));
    AdamConfig cfg;
    cfg.learning_rate = 1e-2;
    AdamState<double> st(p, cfg);
    int steps = 0;
    while (std::abs(p.at("theta").value[0]) >= 1e-3 && steps < 2000) {
      p.at("theta").grad[0] = 2 * p.at("theta").value[0];
      adam_step(st, p);
      ++steps;
    }
    CHECK(std::abs(p.at("theta").value[0]) < 1e-3);
  }

  TEST_CASE("non-finite gradients abort before any update") {
    ParameterStore<float> p;
    p.add("a", Tensor<float>({2}, 1.0f));
    p.add("b", Tensor<float>({2}, 1.0f));
    AdamState<float> st(p, AdamConfig{});
    p.at("a").grad.fill(1.0f);
    p.at("b").grad[1] = std::numeric_limits<float>::infinity();
    try {
      adam_step(st, p);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
    CHECK(p.at("a").value[0] == 1.0f);
    CHECK(st.t == 0);
  }

  TEST_CASE("config validation and mode names") {
    TrainConfig c;
    c.refinement_interval = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    for (auto m : {TrainMode::kSourceOnly, TrainMode::kDann, TrainMode::kVada, TrainMode::kDirtt})
      CHECK(parse_mode(std::string(mode_name(m))) == m);
    CHECK_THROWS_AS(parse_mode("gan"), ConfigError);
    TrainConfig d;
    d.mode = TrainMode::kDann;
    CHECK(d.effective_weights().lambda_s == 0);
    CHECK(d.effective_weights().lambda_d > 0);
    const TrainConfig round = TrainConfig::from_map(small_config(TrainMode::kVada).to_map());
    CHECK(round.to_map() == small_config(TrainMode::kVada).to_map());
  }

  TEST_CASE("zero iterations keep the initialization; metrics row count") {
    const MoonsPair m = small_moons();
    const auto spec = mlp_spec({8, 8}, 2);
    TrainConfig c = small_config(TrainMode::kVada);
    c.iterations = 0;
    MetricsLog log;
    const auto st = train_vada<float>(spec, m.source, m.target.unlabeled(), c, {}, log);
    const auto fresh = init_train_state<float>(spec, c);
    CHECK(same_values(st.student.params, fresh.student.params));
    CHECK(log.rows().empty());
    c.iterations = 23;
    MetricsLog log2;
    train_vada<float>(spec, m.source, m.target.unlabeled(), c, {}, log2);
    CHECK(log2.rows().size() == 23 / 5);
  }

  TEST_CASE("source-only never builds a discriminator") {
    const auto st = init_train_state<float>(mlp_spec({8}, 2), small_config(TrainMode::kSourceOnly));
    CHECK_FALSE(st.disc.has_value());
    CHECK_FALSE(st.adam_disc.has_value());
    const auto dann = init_train_state<float>(mlp_spec({8}, 2), small_config(TrainMode::kDann));
    CHECK(dann.disc.has_value());
  }

  TEST_CASE("metrics totals agree with the breakdown") {
    const MoonsPair m = small_moons();
    std::ostringstream csv;
    MetricsLog log(&csv);
    const TrainConfig c = small_config(TrainMode::kVada);
    train_vada<float>(mlp_spec({8, 8}, 2), m.source, m.target.unlabeled(), c, {&m.source, &m.target}, log);
    CHECK(csv.str().rfind(MetricsLog::kHeader, 0) == 0);
    for (const auto& row : log.rows()) {
      CHECK(std::abs(row.loss.total - vada_total(row.loss, c.effective_weights())) <= 1e-6);
      CHECK((row.tgt_acc >= 0 && row.tgt_acc <= 1));
    }
  }

  TEST_CASE("refinement: teacher refreshes, intervals and frozen teacher") {
    const MoonsPair m = small_moons();
    const auto spec = mlp_spec({8, 8}, 2);
    MetricsLog log;
    const auto init = train_vada<float>(spec, m.source, m.target.unlabeled(), small_config(TrainMode::kVada), {}, log);
    TrainConfig rc = small_config(TrainMode::kDirtt);
    rc.iterations = 10;
    auto st = init_refinement_state(init, rc);
    CHECK(same_values(st.teacher->params, init.ema.shadow));
    CHECK(same_values(st.student.params, init.ema.shadow));
    CHECK_FALSE(st.disc.has_value());
    MetricsLog rlog;
    for (std::uint64_t step = 1; step <= rc.iterations; ++step) {
      const ParameterStore<float> teacher_before = st.teacher->params;
      run_dirtt(st, m.target.unlabeled(), step, {}, rlog);
      if (step % rc.refinement_interval != 0) CHECK(same_values(st.teacher->params, teacher_before));
      else CHECK(same_values(st.teacher->params, st.ema.shadow));
      CHECK(st.interval == step / rc.refinement_interval);
    }
    CHECK(st.teacher_refreshes == rc.iterations / rc.refinement_interval);
    for (const auto& row : rlog.rows()) CHECK(std::abs(row.loss.total - dirtt_total(row.loss, rc.weights)) <= 1e-6);

    TrainConfig bad = rc;
    bad.weights.lambda_t = 0;
    CHECK_THROWS_AS(init_refinement_state(init, bad), ConfigError);
    CHECK_THROWS_AS(refine_dirtt(st, m.target.unlabeled(), rc, {}, rlog), ConfigError);
  }

  TEST_CASE("identical seeds give identical metrics, different seeds differ") {
    const MoonsPair m = small_moons();
    auto run = [&](std::uint64_t seed) {
      std::ostringstream csv;
      MetricsLog log(&csv);
      TrainConfig c = small_config(TrainMode::kVada);
      c.seed = seed;
      train_vada<float>(mlp_spec({8, 8}, 2), m.source, m.target.unlabeled(), c, {&m.source, &m.target}, log);
      return csv.str();
    };
    CHECK(run(1) == run(1));
    CHECK(run(1) != run(2));
  }

  TEST_CASE("checkpoint round trip and continuation") {
    const MoonsPair m = small_moons();
    const auto spec = mlp_spec({8, 8}, 2);
    TrainConfig c = small_config(TrainMode::kVada);
    MetricsLog log;
    auto st = init_train_state<float>(spec, c);
    run_vada(st, m.source, m.target.unlabeled(), 7, {}, log);
    const auto path = temp_path("ckpt.cadp");
    save_checkpoint(st, path.string());
    const auto bytes = encode_checkpoint(st);
    auto loaded = load_checkpoint<float>(path.string(), spec.hash());
    CHECK(encode_checkpoint(loaded) == bytes);
    run_vada(st, m.source, m.target.unlabeled(), 17, {}, log);
    run_vada(loaded, m.source, m.target.unlabeled(), 17, {}, log);
    CHECK(same_values(st.student.params, loaded.student.params));
    CHECK(same_values(st.ema.shadow, loaded.ema.shadow));
    CHECK(same_values(st.disc->params, loaded.disc->params));
    CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
    std::filesystem::remove(path);
  }

  TEST_CASE("checkpoint format errors") {
    const auto spec = mlp_spec({8}, 2);
    const auto st = init_train_state<float>(spec, small_config(TrainMode::kVada));
    auto bytes = encode_checkpoint(st);
    auto kind_of = [](const std::vector<std::uint8_t>& b) {
      try {
        decode_checkpoint<float>(b);
      } catch (const FormatError& e) {
        return e.kind();
      }
      return FormatError::Kind::kIo;
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK(kind_of(bad_magic) == FormatError::Kind::kBadMagic);
    auto bad_version = bytes;
    bad_version[4] = 99;
    CHECK(kind_of(bad_version) == FormatError::Kind::kVersionMismatch);
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK(kind_of(truncated) == FormatError::Kind::kTruncated);

    const auto path = temp_path("arch.cadp");
    save_checkpoint(st, path.string());
    try {
      load_checkpoint<float>(path.string(), mlp_spec({16}, 2).hash());
      FAIL("expected an architecture mismatch");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatError::Kind::kArchitectureMismatch);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("archive container") {
    Archive a;
    a.meta["k"] = "v";
    a.put("x", Tensor<double>({2, 2}, {1, 2, 3, 4}));
    a.put_u64("n", {7, 8});
    CHECK_THROWS_AS(a.put("x", Tensor<double>({1})), FormatError);
    const auto bytes = encode_archive(a, 3);
    const Archive b = decode_archive(bytes, 3);
    CHECK(b.meta_at("k") == "v");
    CHECK(b.get<double>("x")[3] == 4);
    CHECK(b.get_u64("n")[1] == 8);
    CHECK_THROWS_AS(b.get<float>("x"), FormatError);
    CHECK(encode_archive(b, 3) == bytes);
  }
}
