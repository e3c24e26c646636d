#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cadp/cli.hpp"

using namespace cadp;

namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "cadp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cadp_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// A small moons run that finishes in well under a second.
fs::path write_config(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path cfg = dir / "run.toml";
  std::ofstream(cfg) << "preset = \"moons-desk\"\n"
                        "iterations = 30\n"
                        "log_every = 10\n"
                        "batch_size = 16\n"
                        "[moons]\n"
                        "n_per_domain = 100\n"
                        "[refine]\n"
                        "iterations = 12\n"
                        "[output]\n"
                        "dir = \"out\"\n";
  std::ofstream(dir / "refine.toml") << "preset = \"moons-desk\"\n"
                                        "iterations = 30\n"
                                        "log_every = 4\n"
                                        "batch_size = 16\n"
                                        "refinement_interval = 5\n"
                                        "[moons]\n"
                                        "n_per_domain = 100\n"
                                        "[refine]\n"
                                        "iterations = 12\n"
                                        "[output]\n"
                                        "dir = \"refined\"\n";
  return cfg;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2 with a structured message") {
    Result r = run({"frobnicate"});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("\"error\":\"usage\"") != std::string::npos);
    CHECK(run({"train", "--bogus"}).code == kExitUsage);
    CHECK(run({}).code == kExitUsage);
    CHECK(run({"refine", "--config", "x.toml"}).code == kExitUsage);  // --init is required
    CHECK(run({"--help"}).code == kExitOk);
  }

  TEST_CASE("missing config exits 3 and writes nothing") {
    const fs::path dir = fresh_dir("missing");
    Result r = run({"train", "--config", (dir / "missing.toml").string(), "--out", (dir / "out").string()});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("\"error\":\"config\"") != std::string::npos);
    CHECK_FALSE(fs::exists(dir));
  }

  TEST_CASE("invalid config values exit 3") {
    const fs::path dir = fresh_dir("invalid");
    fs::create_directories(dir);
    std::ofstream(dir / "bad.toml") << "unknown_key = 1\n";
    CHECK(run({"train", "--config", (dir / "bad.toml").string()}).code == kExitConfig);
    std::ofstream(dir / "bad2.toml") << "[weights]\nlambda_s = -1\n";
    CHECK(run({"train", "--config", (dir / "bad2.toml").string()}).code == kExitConfig);
    CHECK(run({"train", "--preset", "no-such-preset"}).code == kExitConfig);
    CHECK_FALSE(fs::exists(dir / "out"));
  }

  TEST_CASE("presets lists the table rows") {
    Result r = run({"presets"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("mnist-svhn-no-inorm") != std::string::npos);
    CHECK(r.out.find("0.001") != std::string::npos);
    CHECK(r.out.find("paper-default") != std::string::npos);
  }

  TEST_CASE("train, evaluate, refine, probe, grid and confusion") {
    const fs::path dir = fresh_dir("flow");
    const fs::path cfg = write_config(dir);
    Result t = run({"train", "--config", cfg.string()});
    REQUIRE_MESSAGE(t.code == kExitOk, t.err);
    const fs::path out = dir / "out";
    CHECK(fs::exists(out / "metrics.csv"));
    CHECK(fs::exists(out / "checkpoint.cadp"));
    CHECK(fs::exists(out / "config.resolved.toml"));
    CHECK(t.out.find("\"event\":\"done\"") != std::string::npos);
    const std::string metrics = slurp(out / "metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 3);

    // Same config and seed reproduce the metrics byte for byte.
    Result again = run({"train", "--config", cfg.string(), "--out", (dir / "again").string()});
    REQUIRE(again.code == kExitOk);
    CHECK(slurp(dir / "again" / "metrics.csv") == metrics);
    // The resolved config is itself a valid config.
    CHECK(run({"train", "--config", (out / "config.resolved.toml").string(), "--out", (dir / "resolved").string()})
              .code == kExitOk);
    CHECK(slurp(dir / "resolved" / "metrics.csv") == metrics);

    const std::string ckpt = (out / "checkpoint.cadp").string();
    const std::string ckpt_bytes = slurp(ckpt);
    Result e = run({"eval", "--config", cfg.string(), "--checkpoint", ckpt, "--weights", "raw"});
    CHECK(e.code == kExitOk);
    CHECK(e.out.find("\"weights\":\"raw\"") != std::string::npos);
    CHECK(e.out.find("\"dataset\":\"target\"") != std::string::npos);

    Result r = run({"refine", "--config", (dir / "refine.toml").string(), "--init", ckpt});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    CHECK(r.out.find("\"teacher_refreshes\":2") != std::string::npos);
    const std::string rm = slurp(dir / "refined" / "metrics.csv");
    CHECK(rm.find(",dirt-t,") != std::string::npos);
    CHECK(slurp(ckpt) == ckpt_bytes);  // input checkpoint untouched

    Result same_out = run({"refine", "--config", cfg.string(), "--init", ckpt});
    CHECK(same_out.code == kExitConfig);  // would overwrite its own input

    Result p = run({"probe-jsd", "--config", cfg.string(), "--checkpoint", ckpt, "--layers", "input,L-1"});
    CHECK(p.code == kExitOk);
    CHECK(p.out.find("\"layer\":\"L-1\"") != std::string::npos);
    CHECK(run({"probe-jsd", "--config", cfg.string(), "--checkpoint", ckpt, "--layers", "L-9"}).code != kExitOk);

    Result g = run({"export-grid", "--config", cfg.string(), "--checkpoint", ckpt, "--resolution", "5"});
    CHECK(g.code == kExitOk);
    const std::string grid = slurp(out / "grid.csv");
    CHECK(std::count(grid.begin(), grid.end(), '\n') == 26);

    Result c = run({"confusion", "--config", cfg.string(), "--a", ckpt, "--b", ckpt});
    CHECK(c.code == kExitOk);
    CHECK(c.out.find("\"agreement\":1.0") != std::string::npos);

    Result bad = run({"eval", "--config", cfg.string(), "--checkpoint", (dir / "nope.cadp").string()});
    CHECK(bad.code == kExitFailure);
    CHECK(bad.err.find("\"error\":\"format\"") != std::string::npos);
  }

  TEST_CASE("numerical divergence exits 4 without a final checkpoint") {
    const fs::path dir = fresh_dir("diverge");
    const fs::path cfg = write_config(dir);
    Result r = run({"train", "--config", cfg.string(), "--set", "adam.learning_rate=1e300"});
    CHECK(r.code == kExitNumerical);
    CHECK(r.err.find("\"error\":\"numerical\"") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out" / "checkpoint.cadp"));
  }
}
