#include "cadp/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

#include "cadp/errors.hpp"
#include "cadp/rng.hpp"

namespace cadp {

std::string_view weights_name(WeightsUsed w) { return w == WeightsUsed::kEma ? "ema" : "raw"; }

template <typename T>
std::vector<std::uint32_t> argmax_rows(const Tensor<T>& p) {
  if (p.rank() != 2) throw ShapeError("argmax_rows: expected [N, K]");
  std::vector<std::uint32_t> out(p.dim(0));
  const std::size_t K = p.dim(1);
  for (std::size_t n = 0; n < p.dim(0); ++n) {
    std::uint32_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (p.at(n, k) > p.at(n, best)) best = static_cast<std::uint32_t>(k);
    out[n] = best;
  }
  return out;
}

template <typename T>
EvalReport evaluate(const ArchitectureSpec& spec, const ParameterStore<T>& params, const DomainDataset& data,
                    WeightsUsed weights, std::string tag) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  if (data.num_classes() != spec.num_classes) throw ConfigError("evaluate: class count differs from the model");
  const Tensor<T> x = data.inputs().template cast<T>();
  const Tensor<T> p = predict(spec, params, x);
  const auto pred = argmax_rows(p);
  EvalReport r;
  r.dataset = tag.empty() ? std::string(domain_name(data.tag())) : std::move(tag);
  r.weights = weights;
  r.count = data.size();
  for (std::size_t i = 0; i < r.count; ++i)
    if (pred[i] == data.classes()[i]) ++r.correct;
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  double ent = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = p[i];
    ent -= v * std::log(std::max(v, 1e-8));
  }
  r.mean_entropy = ent / static_cast<double>(r.count);
  return r;
}

// ---------------------------------------------------------------------------
// JSD probe

std::string JsdProbeReport::to_json() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"layer\":\"%s\",\"jsd_lower_bound\":%.9g,\"bound_unclamped\":%.9g,\"heldout_loss\":%.9g,"
                "\"train_accuracy\":%.9g,\"heldout_accuracy\":%.9g,\"n_source\":%zu,\"n_target\":%zu,"
                "\"protocol\":\"%s\"}",
                layer.c_str(), bound, bound_unclamped, heldout_loss, train_accuracy, heldout_accuracy, n_source,
                n_target, protocol.c_str());
  return buf;
}

namespace {

using MatX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;

// Mean binary cross-entropy of logits z against labels y, in stable form.
double mean_bce(const VecX& z, const VecX& y) {
  double acc = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double s = y[i] > 0.5 ? -z[i] : z[i];  // loss = softplus(s)
    acc += s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  }
  return acc / static_cast<double>(z.size());
}

double accuracy(const VecX& z, const VecX& y) {
  std::size_t ok = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) ok += (z[i] > 0) == (y[i] > 0.5);
  return static_cast<double>(ok) / static_cast<double>(z.size());
}

}  // namespace

JsdProbeReport jsd_lower_bound(const Tensor<double>& source, const Tensor<double>& target, const ProbeConfig& cfg,
                               std::string layer) {
  if (source.rank() != 2 || target.rank() != 2 || source.dim(1) != target.dim(1)) {
    throw ShapeError("jsd_lower_bound: expected [N, D] feature sets of equal width");
  }
  if (source.dim(0) < 10 || target.dim(0) < 10) throw ConfigError("jsd_lower_bound: need at least 10 samples per domain");
  if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1)) throw ConfigError("jsd_lower_bound: train_fraction in (0, 1)");
  const std::size_t n = std::min(source.dim(0), target.dim(0)), D = source.dim(1);
  const std::size_t n_train = std::clamp<std::size_t>(static_cast<std::size_t>(cfg.train_fraction * n), 1, n - 1);
  const std::size_t n_held = n - n_train;

  Rng rng = make_rng({cfg.seed, 0x9b0eu});
  auto pick = [&](std::size_t total) {
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);  // balanced subsample; order is the train/held-out split
    return idx;
  };
  const auto is = pick(source.dim(0));
  const auto it = pick(target.dim(0));

  MatX xtr(2 * n_train, D), xho(2 * n_held, D);
  VecX ytr(2 * n_train), yho(2 * n_held);
  auto fill = [&](MatX& m, VecX& y, std::size_t row, const Tensor<double>& t, std::size_t src_row, double label) {
    for (std::size_t d = 0; d < D; ++d) m(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(d)) = t.at(src_row, d);
    y[static_cast<Eigen::Index>(row)] = label;
  };
  for (std::size_t i = 0; i < n_train; ++i) {
    fill(xtr, ytr, 2 * i, source, is[i], 1.0);
    fill(xtr, ytr, 2 * i + 1, target, it[i], 0.0);
  }
  for (std::size_t i = 0; i < n_held; ++i) {
    fill(xho, yho, 2 * i, source, is[n_train + i], 1.0);
    fill(xho, yho, 2 * i + 1, target, it[n_train + i], 0.0);
  }
  // Standardize with training statistics.
  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index d = 0; d < sd.size(); ++d)
    if (!(sd[d] > 1e-12)) sd[d] = 1.0;
  xtr = (xtr.rowwise() - mu).array().rowwise() / sd.array();
  xho = (xho.rowwise() - mu).array().rowwise() / sd.array();

  VecX w = VecX::Zero(static_cast<Eigen::Index>(D)), mw = w, vw = w;
  double b = 0, mb = 0, vb = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double ntr = static_cast<double>(xtr.rows());

  JsdProbeReport r;
  r.layer = std::move(layer);
  r.n_source = r.n_target = n;
  {
    VecX zho = xho * w;
    zho.array() += b;
    r.heldout_loss = mean_bce(zho, yho);
    VecX ztr = xtr * w;
    ztr.array() += b;
    r.train_accuracy = accuracy(ztr, ytr);
    r.heldout_accuracy = accuracy(zho, yho);
  }
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    VecX z = xtr * w;
    z.array() += b;
    VecX resid = (1.0 / (1.0 + (-z.array()).exp())).matrix() - ytr;
    const VecX gw = xtr.transpose() * resid / ntr;
    const double gb = resid.sum() / ntr;
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseAbs2();
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb * gb;
    const double lr_t =
        cfg.learning_rate * std::sqrt(1 - std::pow(b2, static_cast<double>(step))) / (1 - std::pow(b1, static_cast<double>(step)));
    w.array() -= lr_t * mw.array() / (vw.array().sqrt() + eps);
    b -= lr_t * mb / (std::sqrt(vb) + eps);

    VecX zho = xho * w;
    zho.array() += b;
    const double loss = mean_bce(zho, yho);
    if (loss < r.heldout_loss) {
      r.heldout_loss = loss;
      r.heldout_accuracy = accuracy(zho, yho);
      VecX ztr = xtr * w;
      ztr.array() += b;
      r.train_accuracy = accuracy(ztr, ytr);
    }
  }
  r.bound_unclamped = std::numbers::ln2 - r.heldout_loss;
  r.bound = std::clamp(r.bound_unclamped, 0.0, std::numbers::ln2);
  char proto[160];
  std::snprintf(proto, sizeof proto, "logistic-regression adam lr=%g steps=%zu split=%g/%g balanced standardized",
                cfg.learning_rate, cfg.steps, cfg.train_fraction, 1 - cfg.train_fraction);
  r.protocol = proto;
  return r;
}

// ---------------------------------------------------------------------------
// Layer sweep

long parse_layer_id(const ArchitectureSpec& spec, const std::string& id) {
  if (id == "input") return -1;
  if (id.size() > 2 && id[0] == 'L' && id[1] == '-') {
    std::size_t used = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(id.substr(2), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == id.size() - 2 && k < spec.layers.size()) return static_cast<long>(spec.layer_from_end(k));
  }
  throw ConfigError("invalid layer identifier '" + id + "' for " + spec.name + " (use input or L-k, k < " +
                    std::to_string(spec.layers.size()) + ")");
}

std::string layer_id(const ArchitectureSpec& spec, long layer) {
  if (layer < 0) return "input";
  return "L-" + std::to_string(spec.layers.size() - 1 - static_cast<std::size_t>(layer));
}

template <typename T>
LayerSweep layer_probe_sweep(const ArchitectureSpec& spec, const ParameterStore<T>& params,
                             const DomainDataset& source, const DomainDataset& target,
                             const std::vector<std::string>& layers, const ProbeConfig& cfg, WeightsUsed weights) {
  std::vector<long> ids;
  for (const auto& l : layers) ids.push_back(parse_layer_id(spec, l));
  LayerSweep out;
  const Tensor<T> xs = source.inputs().template cast<T>();
  const Tensor<T> xt = target.inputs().template cast<T>();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor<double> fs = forward_layer(spec, params, xs, ids[i]).template cast<double>();
    const Tensor<double> ft = forward_layer(spec, params, xt, ids[i]).template cast<double>();
    out.probes.push_back(jsd_lower_bound(fs, ft, cfg, layers[i]));
  }
  out.source = evaluate(spec, params, source, weights, "source");
  out.target = evaluate(spec, params, target, weights, "target");
  return out;
}

// ---------------------------------------------------------------------------
// Decision grid

template <typename T>
void export_decision_grid(const ArchitectureSpec& spec, const ParameterStore<T>& params, const GridBounds& bounds,
                          std::size_t resolution, std::ostream& out) {
  if (spec.input_shape != Shape{2}) throw ConfigError("export_decision_grid: model input must be 2-D");
  if (resolution < 2) throw ConfigError("export_decision_grid: resolution must be >= 2");
  if (!(bounds.x0_max > bounds.x0_min && bounds.x1_max > bounds.x1_min)) {
    throw ConfigError("export_decision_grid: empty bounds");
  }
  const std::size_t r = resolution;
  Tensor<T> x({r * r, 2});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      x.at(i * r + j, 0) = static_cast<T>(bounds.x0_min + (bounds.x0_max - bounds.x0_min) * j / (r - 1));
      x.at(i * r + j, 1) = static_cast<T>(bounds.x1_min + (bounds.x1_max - bounds.x1_min) * i / (r - 1));
    }
  const Tensor<T> p = predict(spec, params, x);
  out << "x0,x1";
  for (std::size_t k = 0; k < spec.num_classes; ++k) out << ",p_class" << k;
  out << '\n';
  char buf[32];
  for (std::size_t n = 0; n < r * r; ++n) {
    for (std::size_t c = 0; c < 2; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(x.at(n, c)));
      out << (c ? "," : "") << buf;
    }
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(p.at(n, k)));
      out << ',' << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Confusion

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < k; ++i) t += at(i, i);
  return t;
}

ConfusionMatrix confusion_matrix(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b,
                                 std::size_t k) {
  if (a.size() != b.size()) {
    throw ShapeError("confusion_matrix: prediction lists differ in length (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  if (k == 0) throw ConfigError("confusion_matrix: k must be >= 1");
  ConfusionMatrix m{k, std::vector<std::uint64_t>(k * k, 0)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] >= k || b[i] >= k) throw ConfigError("confusion_matrix: label out of range");
    ++m.counts[a[i] * k + b[i]];
  }
  return m;
}

#define CADP_INSTANTIATE(T)                                                                                     \
  template std::vector<std::uint32_t> argmax_rows<T>(const Tensor<T>&);                                         \
  template EvalReport evaluate<T>(const ArchitectureSpec&, const ParameterStore<T>&, const DomainDataset&,      \
                                  WeightsUsed, std::string);                                                    \
  template LayerSweep layer_probe_sweep<T>(const ArchitectureSpec&, const ParameterStore<T>&,                   \
                                           const DomainDataset&, const DomainDataset&,                          \
                                           const std::vector<std::string>&, const ProbeConfig&, WeightsUsed);   \
  template void export_decision_grid<T>(const ArchitectureSpec&, const ParameterStore<T>&, const GridBounds&,  \
                                        std::size_t, std::ostream&);

CADP_INSTANTIATE(float)
CADP_INSTANTIATE(double)

#undef CADP_INSTANTIATE

}  // namespace cadp
