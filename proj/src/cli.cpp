#include "cadp/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "cadp/config.hpp"
#include "cadp/diagnostics.hpp"
#include "cadp/errors.hpp"
#include "cadp/oracle_suite.hpp"
#include "cadp/parallel.hpp"
#include "cadp/training.hpp"

namespace cadp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Options shared by every subcommand that reads an experiment configuration.
struct CommonOptions {
  std::optional<std::string> config;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> set;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "TOML or JSON configuration file");
    app->add_option("--preset", preset, "named preset applied beneath the file keys");
    app->add_option("--seed", seed, "overrides the configured seed");
    app->add_option("--out", out, "output directory");
    app->add_option("--set", set, "extra key=value overrides (repeatable)");
  }

  ExperimentConfig load() const {
    KeyValues cli;
    for (const auto& kv : set) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cli[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    if (seed) cli["seed"] = std::to_string(*seed);
    if (out) cli["output.dir"] = *out;
    ExperimentConfig cfg = load_experiment(config, preset, cli);
    cfg.validate();
    return cfg;
  }
};

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(FormatError::Kind::kIo, "cannot write " + tmp.string());
    f << text;
    if (!f.flush()) throw FormatError(FormatError::Kind::kIo, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json eval_json(const EvalReport& r) {
  return json{{"dataset", r.dataset},   {"accuracy", r.accuracy}, {"mean_entropy", r.mean_entropy},
              {"count", r.count},       {"correct", r.correct},   {"weights", std::string(weights_name(r.weights))}};
}

WeightsUsed parse_weights(const std::string& s) {
  if (s == "ema") return WeightsUsed::kEma;
  if (s == "raw") return WeightsUsed::kRaw;
  throw ConfigError("--weights: expected ema or raw, got '" + s + "'");
}

const ParameterStore<float>& weights_of(const TrainState<float>& st, WeightsUsed w) {
  return w == WeightsUsed::kEma ? st.ema.shadow : st.student.params;
}

const DomainDataset& pick_domain(const DomainPairData& data, const std::string& which) {
  if (which == "source") return data.source;
  if (which == "target") return data.target;
  throw ConfigError("--domain: expected source or target, got '" + which + "'");
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

bool same_file(const fs::path& a, const fs::path& b) {
  return fs::weakly_canonical(a) == fs::weakly_canonical(b);
}

// Runs training or refinement and writes metrics, resolved config and final
// checkpoint into the output directory.
int run_training(const ExperimentConfig& cfg_in, const std::optional<std::string>& init_path, std::ostream& out) {
  ExperimentConfig cfg = cfg_in;
  const bool refine = init_path.has_value();
  const fs::path dir = cfg.output_dir;
  const fs::path ckpt = dir / "checkpoint.cadp";
  TrainConfig tc = cfg.train;
  if (refine) {
    tc.mode = TrainMode::kDirtt;
    if (cfg.refine_iterations > 0) tc.iterations = cfg.refine_iterations;
  } else if (tc.mode == TrainMode::kDirtt) {
    throw ConfigError("train: mode dirt-t runs through the refine subcommand");
  }
  if (tc.checkpoint_every > 0 && tc.checkpoint_path.empty()) tc.checkpoint_path = ckpt.string();
  tc.validate();
  if (refine && same_file(*init_path, ckpt)) throw ConfigError("refine: output checkpoint would overwrite --init");

  const ArchitectureSpec spec = cfg.architecture();
  std::optional<TrainState<float>> init;
  if (refine) init = load_checkpoint<float>(*init_path, spec.hash());
  const DomainPairData data = build_domains(cfg);

  fs::create_directories(dir);
  ExperimentConfig resolved = cfg;
  resolved.train = tc;
  write_text_atomic(dir / "config.resolved.toml", format_toml(resolved.to_map()));
  std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  if (!metrics) throw FormatError(FormatError::Kind::kIo, "cannot write " + (dir / "metrics.csv").string());
  MetricsLog log(&metrics);
  const EvalSets eval{&data.source, &data.target};

  TrainState<float> st = refine ? refine_dirtt<float>(*init, data.target.unlabeled(), tc, eval, log)
                                : train_vada<float>(spec, data.source, data.target.unlabeled(), tc, eval, log);
  metrics.flush();
  save_checkpoint(st, ckpt.string());

  json summary{{"event", "done"},
               {"command", refine ? "refine" : "train"},
               {"mode", std::string(mode_name(tc.mode))},
               {"steps", st.step},
               {"teacher_refreshes", st.teacher_refreshes},
               {"vat_fallback_rows", st.vat_fallback_rows},
               {"checkpoint", ckpt.string()},
               {"metrics", (dir / "metrics.csv").string()}};
  out << summary.dump() << '\n';
  out << eval_json(evaluate(spec, st.ema.shadow, data.source, WeightsUsed::kEma, "source")).dump() << '\n';
  out << eval_json(evaluate(spec, st.ema.shadow, data.target, WeightsUsed::kEma, "target")).dump() << '\n';
  return kExitOk;
}

int run_presets(std::ostream& out) {
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %-40s %-8s %-9s %-9s %-9s %-9s %-6s\n", "name", "task", "inorm",
                "lambda_d", "lambda_s", "lambda_t", "beta", "B");
  out << line;
  for (const Preset& p : presets()) {
    auto get = [&](const char* k) {
      auto it = p.overrides.find(k);
      return it == p.overrides.end() ? std::string("-") : it->second;
    };
    std::snprintf(line, sizeof line, "%-22s %-40s %-8s %-9s %-9s %-9s %-9s %-6s\n", p.name.c_str(), p.task.c_str(),
                  p.instance_norm.c_str(), get("weights.lambda_d").c_str(), get("weights.lambda_s").c_str(),
                  get("weights.lambda_t").c_str(), get("weights.beta").c_str(), get("refinement_interval").c_str());
    out << line;
    if (!p.note.empty()) out << "    note: " << p.note << '\n';
    if (!p.from_table) {
      std::string keys;
      for (const auto& [k, v] : p.overrides) keys += (keys.empty() ? "" : " ") + k + "=" + v;
      out << "    desk preset: " << keys << '\n';
    }
  }
  return kExitOk;
}

int run_gradcheck(const std::string& precision, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  std::vector<Precision> runs;
  if (precision == "double" || precision == "both") runs.push_back(Precision::kDouble);
  if (precision == "float" || precision == "both") runs.push_back(Precision::kFloat);
  if (runs.empty()) throw ConfigError("--precision: expected double, float or both, got '" + precision + "'");
  bool pass = true;
  std::size_t failed = 0;
  for (Precision p : runs) {
    const OracleSuiteReport rep = run_gradient_oracle_suite(p, seed);
    for (const OracleCase& c : rep.cases) {
      char line[256];
      std::snprintf(line, sizeof line, "%s %-6s %-10s %-30s max_rel_err=%.3e tol=%.0e", c.pass ? "PASS" : "FAIL",
                    p == Precision::kDouble ? "double" : "float", c.group.c_str(), c.name.c_str(),
                    c.max_relative_error, c.tolerance);
      out << line;
      if (!c.detail.empty()) out << " detail=\"" << c.detail << '"';
      out << '\n';
      if (!c.pass) ++failed;
    }
    pass = pass && rep.pass;
  }
  if (!pass) {
    err << json{{"error", "oracle"}, {"exit_code", int(kExitFailure)}, {"message", std::to_string(failed) + " gradient checks failed"}}.dump()
        << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

void fail(std::ostream& err, const char* kind, int code, const std::string& message) {
  err << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  if (const char* env = std::getenv("CADP_THREADS")) {
    char* end = nullptr;
    const unsigned long n = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) set_worker_threads(n);
  }

  CLI::App app{"Cluster-assumption domain adaptation: adaptation, refinement and diagnostics", "cadp"};
  app.require_subcommand(1);

  CommonOptions train_opt, refine_opt, eval_opt, probe_opt, grid_opt, conf_opt;

  auto* train = app.add_subcommand("train", "adaptation run (mode source-only, dann or vada)");
  train_opt.attach(train);

  std::string init_path;
  auto* refine = app.add_subcommand("refine", "teacher-student refinement from an adaptation checkpoint");
  refine_opt.attach(refine);
  refine->add_option("--init", init_path, "adaptation checkpoint")->required();

  std::string eval_ckpt, eval_weights = "ema", eval_domain = "both";
  auto* eval = app.add_subcommand("eval", "accuracy and mean entropy of a checkpoint");
  eval_opt.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--weights", eval_weights, "ema or raw")->capture_default_str();
  eval->add_option("--domain", eval_domain, "source, target or both")->capture_default_str();

  std::string probe_ckpt, probe_layers, probe_weights = "ema";
  auto* probe = app.add_subcommand("probe-jsd", "domain-origin probe bounds on layer activations");
  probe_opt.attach(probe);
  probe->add_option("--checkpoint", probe_ckpt)->required();
  probe->add_option("--layers", probe_layers, "comma list of 'input' and 'L-k' ids (default: input and every layer)");
  probe->add_option("--weights", probe_weights, "ema or raw")->capture_default_str();

  std::string grid_ckpt, grid_bounds, grid_file;
  std::size_t grid_res = 101;
  auto* grid = app.add_subcommand("export-grid", "class probabilities over a 2-D grid (CSV)");
  grid_opt.attach(grid);
  grid->add_option("--checkpoint", grid_ckpt)->required();
  grid->add_option("--resolution", grid_res)->capture_default_str();
  grid->add_option("--bounds", grid_bounds, "x0_min,x0_max,x1_min,x1_max");
  grid->add_option("--file", grid_file, "output CSV (default <out>/grid.csv)");

  std::string conf_a, conf_b, conf_domain = "target";
  auto* conf = app.add_subcommand("confusion", "agreement matrix between the predictions of two checkpoints");
  conf_opt.attach(conf);
  conf->add_option("--a", conf_a, "checkpoint for rows")->required();
  conf->add_option("--b", conf_b, "checkpoint for columns")->required();
  conf->add_option("--domain", conf_domain, "source or target")->capture_default_str();

  std::string gc_precision = "both";
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference oracle suite over every op and objective");
  gc->add_option("--precision", gc_precision, "double, float or both")->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  auto* pre = app.add_subcommand("presets", "list named hyperparameter presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    fail(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  }

  try {
    if (*pre) return run_presets(out);
    if (*gc) return run_gradcheck(gc_precision, gc_seed, out, err);
    if (*train) return run_training(train_opt.load(), std::nullopt, out);
    if (*refine) return run_training(refine_opt.load(), init_path, out);

    if (*eval) {
      const ExperimentConfig cfg = eval_opt.load();
      const WeightsUsed w = parse_weights(eval_weights);
      const ArchitectureSpec spec = cfg.architecture();
      const TrainState<float> st = load_checkpoint<float>(eval_ckpt, spec.hash());
      const DomainPairData data = build_domains(cfg);
      std::vector<std::string> domains = eval_domain == "both" ? std::vector<std::string>{"source", "target"}
                                                                : std::vector<std::string>{eval_domain};
      for (const auto& d : domains)
        out << eval_json(evaluate(spec, weights_of(st, w), pick_domain(data, d), w, d)).dump() << '\n';
      return kExitOk;
    }
    if (*probe) {
      const ExperimentConfig cfg = probe_opt.load();
      const WeightsUsed w = parse_weights(probe_weights);
      const ArchitectureSpec spec = cfg.architecture();
      const TrainState<float> st = load_checkpoint<float>(probe_ckpt, spec.hash());
      const DomainPairData data = build_domains(cfg);
      std::vector<std::string> layers = split_commas(probe_layers);
      if (layers.empty()) {
        layers.push_back("input");
        for (long k = static_cast<long>(spec.layers.size()) - 1; k >= 0; --k) layers.push_back("L-" + std::to_string(k));
      }
      ProbeConfig pc;
      pc.seed = cfg.train.seed;
      const LayerSweep sweep = layer_probe_sweep(spec, weights_of(st, w), data.source, data.target, layers, pc, w);
      for (const auto& r : sweep.probes) out << r.to_json() << '\n';
      out << eval_json(sweep.source).dump() << '\n' << eval_json(sweep.target).dump() << '\n';
      return kExitOk;
    }
    if (*grid) {
      const ExperimentConfig cfg = grid_opt.load();
      const ArchitectureSpec spec = cfg.architecture();
      const TrainState<float> st = load_checkpoint<float>(grid_ckpt, spec.hash());
      GridBounds b;
      if (!grid_bounds.empty()) {
        const auto parts = split_commas(grid_bounds);
        if (parts.size() != 4) throw ConfigError("--bounds expects four comma-separated numbers");
        try {
          b = GridBounds{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2]), std::stod(parts[3])};
        } catch (const std::exception&) {
          throw ConfigError("--bounds: not a number in '" + grid_bounds + "'");
        }
      }
      const fs::path file = grid_file.empty() ? fs::path(cfg.output_dir) / "grid.csv" : fs::path(grid_file);
      std::ostringstream csv;
      export_decision_grid(spec, st.ema.shadow, b, grid_res, csv);
      if (file.has_parent_path()) fs::create_directories(file.parent_path());
      write_text_atomic(file, csv.str());
      out << json{{"event", "grid"}, {"file", file.string()}, {"rows", grid_res * grid_res}}.dump() << '\n';
      return kExitOk;
    }
    if (*conf) {
      const ExperimentConfig cfg = conf_opt.load();
      const ArchitectureSpec spec = cfg.architecture();
      const TrainState<float> a = load_checkpoint<float>(conf_a, spec.hash());
      const TrainState<float> bst = load_checkpoint<float>(conf_b, spec.hash());
      const DomainPairData data = build_domains(cfg);
      const DomainDataset& d = pick_domain(data, conf_domain);
      const Tensor<float> x = d.inputs();
      const auto pa = argmax_rows(predict(spec, a.ema.shadow, x));
      const auto pb = argmax_rows(predict(spec, bst.ema.shadow, x));
      const ConfusionMatrix m = confusion_matrix(pa, pb, spec.num_classes);
      for (std::size_t i = 0; i < m.k; ++i) {
        for (std::size_t j = 0; j < m.k; ++j) out << (j ? "," : "") << m.at(i, j);
        out << '\n';
      }
      out << json{{"event", "confusion"},
                  {"domain", conf_domain},
                  {"total", m.total()},
                  {"trace", m.trace()},
                  {"agreement", static_cast<double>(m.trace()) / static_cast<double>(m.total())}}
                 .dump()
          << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    fail(err, "config", kExitConfig, e.what());
    return kExitConfig;
  } catch (const NumericalError& e) {
    fail(err, "numerical", kExitNumerical, e.what());
    return kExitNumerical;
  } catch (const FormatError& e) {
    fail(err, "format", kExitFailure, e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    fail(err, "runtime", kExitFailure, e.what());
    return kExitFailure;
  }
  fail(err, "usage", kExitUsage, "no subcommand");
  return kExitUsage;
}

}  // namespace cadp
