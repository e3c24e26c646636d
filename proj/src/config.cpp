#include "cadp/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cadp/errors.hpp"
#include "cadp/rng.hpp"

#ifndef CADP_DATA_DIR
#define CADP_DATA_DIR "data"
#endif

namespace cadp {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

bool valid_key(const std::string& k) {
  if (k.empty() || k.front() == '.' || k.back() == '.') return false;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  }
  return k.find("..") == std::string::npos;
}

// Cuts a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && quoted) {
      ++i;
      continue;
    }
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& v, const std::string& where) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"') throw ConfigError(where + ": unterminated string");
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    char c = v[i];
    if (c == '"') throw ConfigError(where + ": stray quote inside string");
    if (c == '\\') {
      if (i + 2 >= v.size()) throw ConfigError(where + ": dangling escape");
      c = v[++i];
      switch (c) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case '\\': out += '\\'; break;
        case '"': out += '"'; break;
        default: throw ConfigError(where + ": unsupported escape \\" + std::string(1, c));
      }
      continue;
    }
    out += c;
  }
  return out;
}

std::string parse_scalar(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError(where + ": missing value");
  if (v.front() == '"') return unquote(v, where);
  if (v.front() == '\'') {
    if (v.size() < 2 || v.back() != '\'') throw ConfigError(where + ": unterminated string");
    return v.substr(1, v.size() - 2);
  }
  for (char c : v) {
    if (std::isspace(static_cast<unsigned char>(c)) || c == '[' || c == ']' || c == '=' || c == '{') {
      throw ConfigError(where + ": malformed value '" + v + "'");
    }
  }
  return v;
}

std::string parse_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw ConfigError(where + ": unterminated array");
    const std::string body = trim(v.substr(1, v.size() - 2));
    if (body.empty()) return "";
    std::string out;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (trim(item).empty()) continue;  // trailing comma
      if (!out.empty()) out += ',';
      out += parse_scalar(item, where);
    }
    return out;
  }
  return parse_scalar(v, where);
}

std::uint64_t to_u64(const std::string& k, const std::string& v) {
  if (v.empty() || !std::isdigit(static_cast<unsigned char>(v[0]))) {
    throw ConfigError("key '" + k + "': expected a non-negative integer, got '" + v + "'");
  }
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || *end != '\0') throw ConfigError("key '" + k + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& k, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || errno != 0 || *end != '\0') throw ConfigError("key '" + k + "': expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("key '" + k + "': expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

bool is_train_key(const std::string& k) {
  static const char* const top[] = {"mode",      "encoder_loss",     "iterations",      "refinement_interval",
                                    "batch_size", "seed",            "log_every",       "checkpoint_every",
                                    "checkpoint_path", "ema_momentum"};
  for (const char* t : top)
    if (k == t) return true;
  return k.rfind("weights.", 0) == 0 || k.rfind("vat.", 0) == 0 || k.rfind("adam.", 0) == 0;
}

void flatten_json(const nlohmann::json& j, const std::string& prefix, KeyValues& out, const std::string& origin) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto& v = it.value();
    if (v.is_object()) {
      flatten_json(v, key, out, origin);
      continue;
    }
    std::string s;
    if (v.is_string()) {
      s = v.get<std::string>();
    } else if (v.is_boolean()) {
      s = v.get<bool>() ? "true" : "false";
    } else if (v.is_number()) {
      s = v.dump();
    } else if (v.is_array()) {
      for (const auto& e : v) {
        if (e.is_object() || e.is_array() || e.is_null()) {
          throw ConfigError(origin + ": key '" + key + "': arrays may hold scalars only");
        }
        if (!s.empty()) s += ',';
        s += e.is_string() ? e.get<std::string>() : e.dump();
      }
    } else {
      throw ConfigError(origin + ": key '" + key + "': null is not a valid value");
    }
    out[key] = s;
  }
}

}  // namespace

KeyValues parse_toml(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::string section;
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed table header");
      section = trim(s.substr(1, s.size() - 2));
      if (!valid_key(section)) throw ConfigError(where + ": invalid table name '" + section + "'");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (kv.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    kv[full] = parse_value(s.substr(eq + 1), where);
  }
  return kv;
}

KeyValues parse_json(const std::string& text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ": top level must be an object");
  KeyValues kv;
  flatten_json(j, "", kv, origin);
  return kv;
}

KeyValues read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  if (std::filesystem::path(path).extension() == ".json") return parse_json(ss.str(), path);
  return parse_toml(ss.str(), path);
}

std::string format_toml(const KeyValues& kv) {
  auto value = [](const std::string& k, const std::string& v) {
    // Numbers and booleans stay bare; everything else is quoted.
    char* end = nullptr;
    std::strtod(v.c_str(), &end);
    const bool numeric = !v.empty() && *end == '\0' && v.find(',') == std::string::npos;
    if (k == "arch.widths" || k == "moons.translation") return "[" + v + "]";
    if (numeric || v == "true" || v == "false") return v;
    std::string q = "\"";
    for (char c : v) {
      if (c == '"' || c == '\\') q += '\\';
      q += c;
    }
    return q + "\"";
  };
  std::string top, tables;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> groups;
  for (const auto& [k, v] : kv) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) {
      top += k + " = " + value(k, v) + "\n";
    } else {
      groups[k.substr(0, dot)].emplace_back(k.substr(dot + 1), value(k, v));
    }
  }
  for (const auto& [g, items] : groups) {
    tables += "\n[" + g + "]\n";
    for (const auto& [k, v] : items) tables += k + " = " + v + "\n";
  }
  return top + tables;
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig ExperimentConfig::from_map(const KeyValues& kv) {
  ExperimentConfig c;
  c.digits.images = std::string(CADP_DATA_DIR) + "/mnist5k-images-idx3-ubyte.gz";
  c.digits.labels = std::string(CADP_DATA_DIR) + "/mnist5k-labels-idx1-ubyte.gz";
  KeyValues train_kv;
  for (const auto& [k, v] : kv) {
    if (is_train_key(k)) {
      train_kv[k] = v;
    } else if (k == "preset") {
      c.preset = v;
    } else if (k == "budget") {
      c.budget = v;
    } else if (k == "refine.iterations") {
      c.refine_iterations = to_u64(k, v);
    } else if (k == "output.dir") {
      c.output_dir = v;
    } else if (k == "dataset.kind") {
      if (v == "moons") c.dataset = DatasetKind::kMoons;
      else if (v == "digits") c.dataset = DatasetKind::kDigits;
      else throw ConfigError("key 'dataset.kind': expected moons or digits, got '" + v + "'");
    } else if (k == "moons.n_per_domain") {
      c.moons.n_per_domain = to_u64(k, v);
    } else if (k == "moons.noise_std") {
      c.moons.noise_std = to_double(k, v);
    } else if (k == "moons.rotation_degrees") {
      c.moons.rotation_degrees = to_double(k, v);
    } else if (k == "moons.translation") {
      const auto xs = split_list(v);
      if (xs.size() != 2) throw ConfigError("key 'moons.translation': expected two numbers");
      c.moons.translation = {to_double(k, xs[0]), to_double(k, xs[1])};
    } else if (k == "moons.seed") {
      c.moons.seed = to_u64(k, v);
    } else if (k == "digits.images") {
      c.digits.images = v;
    } else if (k == "digits.labels") {
      c.digits.labels = v;
    } else if (k == "digits.count") {
      c.digits.count = to_u64(k, v);
    } else if (k == "digits.color_seed") {
      c.digits.color_seed = to_u64(k, v);
    } else if (k == "digits.color_grid") {
      c.digits.color_grid = to_u64(k, v);
    } else if (k == "digits.pad") {
      c.digits.pad = to_u64(k, v);
    } else if (k == "arch.kind") {
      c.arch.kind = v;
    } else if (k == "arch.widths") {
      c.arch.widths.clear();
      for (const auto& w : split_list(v)) c.arch.widths.push_back(to_u64(k, w));
    } else if (k == "arch.noise_sigma") {
      c.arch.noise_sigma = to_double(k, v);
    } else if (k == "arch.instance_norm") {
      c.arch.instance_norm = to_bool(k, v);
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  c.train = TrainConfig::from_map(train_kv);
  if (c.budget != "desk") {
    static const std::pair<const char*, std::size_t> budgets[] = {
        {"full-20k", 20000}, {"full-40k", 40000}, {"full-60k", 60000}, {"full-80k", 80000}};
    bool found = false;
    for (const auto& [name, refine] : budgets) {
      if (c.budget == name) {
        c.train.iterations = 80000;
        c.refine_iterations = refine;
        found = true;
      }
    }
    if (!found) throw ConfigError("key 'budget': expected desk or full-{20,40,60,80}k, got '" + c.budget + "'");
  }
  c.validate();
  return c;
}

KeyValues ExperimentConfig::to_map() const {
  KeyValues kv = train.to_map();
  if (!preset.empty()) kv["preset"] = preset;
  kv["budget"] = budget;
  kv["refine.iterations"] = std::to_string(refine_iterations);
  kv["output.dir"] = output_dir;
  kv["dataset.kind"] = dataset == DatasetKind::kMoons ? "moons" : "digits";
  kv["moons.n_per_domain"] = std::to_string(moons.n_per_domain);
  kv["moons.noise_std"] = num(moons.noise_std);
  kv["moons.rotation_degrees"] = num(moons.rotation_degrees);
  kv["moons.translation"] = num(moons.translation[0]) + "," + num(moons.translation[1]);
  kv["moons.seed"] = std::to_string(moons.seed);
  kv["digits.images"] = digits.images;
  kv["digits.labels"] = digits.labels;
  kv["digits.count"] = std::to_string(digits.count);
  kv["digits.color_seed"] = std::to_string(digits.color_seed);
  kv["digits.color_grid"] = std::to_string(digits.color_grid);
  kv["digits.pad"] = std::to_string(digits.pad);
  kv["arch.kind"] = arch.kind;
  kv["arch.widths"] = join(arch.widths);
  kv["arch.noise_sigma"] = num(arch.noise_sigma);
  kv["arch.instance_norm"] = arch.instance_norm ? "true" : "false";
  return kv;
}

void ExperimentConfig::validate() const {
  train.validate();
  moons.validate();
  if (arch.kind != "mlp" && arch.kind != "small-cnn" && arch.kind != "large-cnn") {
    throw ConfigError("arch.kind: expected mlp, small-cnn or large-cnn, got '" + arch.kind + "'");
  }
  if (arch.kind == "mlp" && arch.widths.empty()) throw ConfigError("arch.widths: need at least one hidden layer");
  if (arch.kind == "mlp" && arch.instance_norm) throw ConfigError("arch.instance_norm applies to image inputs only");
  if (dataset == DatasetKind::kMoons && arch.kind != "mlp") throw ConfigError("moons inputs need arch.kind = mlp");
  if (dataset == DatasetKind::kDigits && arch.kind == "mlp") throw ConfigError("digit images need a CNN arch.kind");
  if (arch.noise_sigma < 0) throw ConfigError("arch.noise_sigma must be >= 0");
  if (digits.color_grid < 2) throw ConfigError("digits.color_grid must be >= 2");
  if (digits.pad < 28) throw ConfigError("digits.pad must be >= 28");
  if (arch.kind == "large-cnn" && digits.pad != 32) throw ConfigError("large-cnn expects 32x32 inputs");
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
}

ArchitectureSpec ExperimentConfig::architecture() const {
  if (arch.kind == "mlp") return mlp_spec(arch.widths, 2, 2);
  if (arch.kind == "small-cnn") return small_cnn_spec(10, arch.instance_norm, arch.noise_sigma, 3, digits.pad, digits.pad);
  return large_cnn_spec(10, arch.instance_norm, arch.noise_sigma);
}

// ---------------------------------------------------------------------------
// Presets

const std::vector<Preset>& presets() {
  auto table = [](std::string name, std::string task, std::string inorm, double ld, double ls, double lt, double beta,
                  std::size_t interval, std::string note = {}, KeyValues extra = {}) {
    Preset p{std::move(name), std::move(task), std::move(inorm), true, std::move(note), std::move(extra)};
    p.overrides["weights.lambda_d"] = num(ld);
    p.overrides["weights.lambda_s"] = num(ls);
    p.overrides["weights.lambda_t"] = num(lt);
    p.overrides["weights.beta"] = num(beta);
    p.overrides["refinement_interval"] = std::to_string(interval);
    if (p.instance_norm == "yes") p.overrides["arch.instance_norm"] = "true";
    if (p.instance_norm == "no") p.overrides["arch.instance_norm"] = "false";
    return p;
  };
  static const std::vector<Preset> all = [&] {
    std::vector<Preset> v;
    v.push_back(table("mnist-mnistm", "MNIST -> MNIST-M", "yes, no", 1e-2, 0, 1e-2, 1e-2, 500));
    v.push_back(table("svhn-mnist", "SVHN -> MNIST", "yes, no", 1e-2, 0, 1e-2, 1e-2, 500));
    v.push_back(table("mnist-svhn", "MNIST -> SVHN", "yes", 1e-2, 1, 1e-2, 1e-2, 5000));
    v.push_back(table("mnist-svhn-no-inorm", "MNIST -> SVHN", "no", 1e-2, 1, 1e-2, 1e-3, 5000,
                      "conditional entropy off during adaptation only; refinement keeps it",
                      {{"weights.target_entropy", "false"}}));
    v.push_back(table("digits-svhn", "SYN DIGITS -> SVHN", "yes, no", 1e-2, 1, 1e-1, 1e-2, 5000));
    v.push_back(table("signs-gtsrb", "SYN SIGNS -> GTSRB", "yes, no", 1e-2, 1, 1e-2, 1e-2, 5000));
    v.push_back(table("cifar-stl", "CIFAR -> STL", "yes, no", 0, 1, 1e-1, 1e-2, 5000));
    v.push_back(table("stl-cifar", "STL -> CIFAR", "yes, no", 0, 0, 1e-1, 1e-2, 5000));
    v.push_back(table("room-a-b", "Wi-Fi Room A -> B", "yes", 0, 0, 1e-2, 1e-2, 5000,
                      "non-image task; the instance-norm column is recorded as listed"));
    {
      Preset p = table("paper-default", "any (no prior on the covariate shift)", "yes, no", 1e-2, 1, 1e-2, 1e-2, 5000,
                       "the fallback setting recommended when nothing is known about the shift");
      v.push_back(p);
    }
    v.push_back(Preset{"moons-desk",
                       "shifted two moons, desk scale",
                       "no",
                       false,
                       "adaptation 3000 steps, refinement 1500 steps with B = 500",
                       {{"dataset.kind", "moons"},
                        {"arch.kind", "mlp"},
                        {"arch.widths", "64,64"},
                        {"weights.lambda_d", "0.01"},
                        {"weights.lambda_s", "1"},
                        {"weights.lambda_t", "0.01"},
                        {"weights.beta", "0.01"},
                        {"vat.epsilon", "0.1"},
                        {"vat.xi", "0.001"},
                        {"iterations", "3000"},
                        {"refine.iterations", "1500"},
                        {"refinement_interval", "500"},
                        {"batch_size", "64"},
                        {"log_every", "100"}}});
    v.push_back(Preset{"digits-desk",
                       "MNIST -> colored MNIST, desk scale",
                       "no",
                       false,
                       "mnist-mnistm weights; small batch keeps 3000 steps within a CPU hour",
                       {{"dataset.kind", "digits"},
                        {"arch.kind", "small-cnn"},
                        {"arch.instance_norm", "false"},
                        {"weights.lambda_d", "0.01"},
                        {"weights.lambda_s", "0"},
                        {"weights.lambda_t", "0.01"},
                        {"weights.beta", "0.01"},
                        {"vat.epsilon", "1"},
                        {"vat.xi", "0.001"},
                        {"iterations", "3000"},
                        {"refine.iterations", "1000"},
                        {"refinement_interval", "500"},
                        {"batch_size", "8"},
                        {"log_every", "500"}}});
    return v;
  }();
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  std::string names;
  for (const auto& p : presets()) names += (names.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown preset '" + name + "' (known: " + names + ")");
}

ExperimentConfig load_experiment(const std::optional<std::string>& config_path,
                                 const std::optional<std::string>& preset_override, const KeyValues& cli_overrides) {
  KeyValues file;
  std::filesystem::path base = std::filesystem::current_path();
  if (config_path) {
    file = read_config_file(*config_path);
    base = std::filesystem::absolute(*config_path).parent_path();
  }
  std::string preset_name;
  if (auto it = file.find("preset"); it != file.end()) preset_name = it->second;
  if (preset_override) preset_name = *preset_override;

  KeyValues merged;
  if (!preset_name.empty()) merged = find_preset(preset_name).overrides;
  for (const auto& [k, v] : file) merged[k] = v;
  for (const auto& [k, v] : cli_overrides) merged[k] = v;
  if (!preset_name.empty()) merged["preset"] = preset_name;

  // File-relative paths are resolved here, before anything runs.
  for (const char* key : {"digits.images", "digits.labels", "output.dir", "checkpoint_path"}) {
    auto it = merged.find(key);
    if (it == merged.end() || it->second.empty()) continue;
    if (cli_overrides.count(key)) {
      it->second = std::filesystem::absolute(it->second).lexically_normal().string();
    } else if (std::filesystem::path(it->second).is_relative()) {
      it->second = (base / it->second).lexically_normal().string();
    }
  }
  ExperimentConfig cfg = ExperimentConfig::from_map(merged);
  if (!merged.count("output.dir")) cfg.output_dir = std::filesystem::absolute(cfg.output_dir).string();
  return cfg;
}

// ---------------------------------------------------------------------------
// Domains

DomainPairData build_domains(const ExperimentConfig& cfg) {
  if (cfg.dataset == DatasetKind::kMoons) {
    MoonsPair pair = make_moons_pair(cfg.moons);
    return {pair.source, pair.target};
  }
  DomainDataset raw = load_idx(cfg.digits.images, cfg.digits.labels);
  if (cfg.digits.count > 0 && cfg.digits.count < raw.size()) {
    std::vector<std::size_t> idx(raw.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = make_rng({cfg.digits.color_seed, 0x5b5eu});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cfg.digits.count);
    std::sort(idx.begin(), idx.end());
    raw = raw.subset(idx);
  }
  DomainDataset padded = pad_images(raw, cfg.digits.pad, cfg.digits.pad);
  DomainDataset source = broadcast_channels(padded, 3);
  DomainDataset target = synthesize_colored_target(padded, cfg.digits.color_seed, ColorFieldConfig{cfg.digits.color_grid});
  return {source, target};
}

}  // namespace cadp
