#include "cadp/objectives.hpp"

#include <cmath>
#include <optional>
#include <random>

#include "cadp/rng.hpp"

namespace cadp {

namespace {

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0; }

double flog(double v) { return std::log(std::max(v, kLogFloor)); }

template <typename T>
void check_rows(const Tensor<T>& p, const char* what) {
  if (p.rank() != 2 || p.dim(0) == 0 || p.dim(1) == 0) {
    throw ShapeError(std::string(what) + ": expected non-empty [N, K], got " + to_string(p.shape()));
  }
}

template <typename T>
ParameterStore<T>& mut(const ParameterStore<T>& p) {
  // Constant references never receive gradient and, with update_stats off,
  // never write running statistics.
  return const_cast<ParameterStore<T>&>(p);
}

template <typename T>
Var weighted_add(Graph<T>& g, Var acc, Var term, double w) {
  return g.add(acc, g.scale(term, static_cast<T>(w)));
}

}  // namespace

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {
      {"lambda_d", lambda_d}, {"lambda_s", lambda_s}, {"lambda_t", lambda_t}, {"beta", beta}};
  for (const auto& [name, v] : all) {
    if (!finite_nonneg(v)) throw ConfigError(std::string(name) + " must be finite and non-negative");
  }
}

void VatConfig::validate() const {
  if (!(std::isfinite(epsilon) && epsilon > 0)) throw ConfigError("vat epsilon must be finite and positive");
  if (!(std::isfinite(xi) && xi > 0)) throw ConfigError("vat xi must be finite and positive");
  if (power_iterations < 1) throw ConfigError("vat power_iterations must be >= 1");
}

double vada_total(const LossBreakdown& b, const LossWeights& w) {
  double t = b.l_y + w.lambda_d * b.l_d_enc + w.lambda_s * b.l_v_src;
  double tgt = 0;
  if (w.target_vat) tgt += b.l_v_tgt;
  if (w.target_entropy) tgt += b.l_c;
  return t + w.lambda_t * tgt;
}

double dirtt_total(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_t * (b.l_v_tgt + b.l_c) + w.beta * b.l_kl_teacher;
}

// ---------------------------------------------------------------------------
// Value-level losses

template <typename T>
double cross_entropy(const Tensor<T>& p, const Tensor<T>& y) {
  check_rows(p, "cross_entropy");
  if (p.shape() != y.shape()) throw ShapeError("cross_entropy: labels " + to_string(y.shape()) + " vs " +
                                               to_string(p.shape()));
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (y[i] != T{0}) acc += static_cast<double>(y[i]) * flog(p[i]);
  return -acc / static_cast<double>(p.dim(0));
}

template <typename T>
double conditional_entropy(const Tensor<T>& p) {
  check_rows(p, "conditional_entropy");
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += static_cast<double>(p[i]) * flog(p[i]);
  return -acc / static_cast<double>(p.dim(0));
}

double kl_categorical(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ShapeError("kl_categorical: rows must have equal non-zero length");
  double acc = 0;
  for (std::size_t k = 0; k < p.size(); ++k) acc += p[k] * (flog(p[k]) - flog(q[k]));
  return acc;
}

template <typename T>
double kl_mean(const Tensor<T>& p, const Tensor<T>& q) {
  check_rows(p, "kl_mean");
  if (p.shape() != q.shape()) throw ShapeError("kl_mean: shapes differ");
  const std::size_t K = p.dim(1);
  std::vector<double> a(K), b(K);
  double acc = 0;
  for (std::size_t n = 0; n < p.dim(0); ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      a[k] = p.at(n, k);
      b[k] = q.at(n, k);
    }
    acc += kl_categorical(a, b);
  }
  return acc / static_cast<double>(p.dim(0));
}

std::pair<double, double> discriminator_losses(std::span<const double> d_source, std::span<const double> d_target,
                                               EncoderLoss form) {
  if (d_source.empty() || d_target.empty()) throw ShapeError("discriminator_losses: empty batch");
  double ls = 0, l1s = 0, lt = 0, l1t = 0;
  for (double d : d_source) {
    ls += flog(d);
    l1s += flog(1 - d);
  }
  for (double d : d_target) {
    lt += flog(d);
    l1t += flog(1 - d);
  }
  const double ns = static_cast<double>(d_source.size()), nt = static_cast<double>(d_target.size());
  const double disc = -ls / ns - l1t / nt;
  const double enc = form == EncoderLoss::kNonSaturating ? -lt / nt - l1s / ns : ls / ns + l1t / nt;
  return {disc, enc};
}

// ---------------------------------------------------------------------------
// Graph-level losses

template <typename T>
Var cross_entropy(Graph<T>& g, Var p, Var y) {
  if (g.shape(p).size() != 2) throw ShapeError("cross_entropy: probabilities must be [N, K]");
  const T inv_n = T{1} / static_cast<T>(g.shape(p)[0]);
  return g.scale(g.sum(g.mul(y, g.log(p))), -inv_n);
}

template <typename T>
Var conditional_entropy(Graph<T>& g, Var p) {
  if (g.shape(p).size() != 2) throw ShapeError("conditional_entropy: probabilities must be [N, K]");
  const T inv_n = T{1} / static_cast<T>(g.shape(p)[0]);
  return g.scale(g.sum(g.mul(p, g.log(p))), -inv_n);
}

template <typename T>
Var kl_mean(Graph<T>& g, Var p, Var q) {
  if (g.shape(p) != g.shape(q) || g.shape(p).size() != 2) throw ShapeError("kl_mean: expected equal [N, K] shapes");
  const T inv_n = T{1} / static_cast<T>(g.shape(p)[0]);
  Var pd = g.detach(p);
  return g.scale(g.sum(g.mul(pd, g.sub(g.log(pd), g.log(q)))), inv_n);
}

template <typename T>
DiscriminatorLossVars discriminator_losses(Graph<T>& g, Var d_source, Var d_target, EncoderLoss form) {
  Var one = g.constant(Tensor<T>::scalar(T{1}));
  auto complement = [&](Var d) { return g.add(g.scale(d, T{-1}), one); };
  Var log_ds = g.mean(g.log(d_source));
  Var log_1mdt = g.mean(g.log(complement(d_target)));
  DiscriminatorLossVars out;
  out.disc = g.scale(g.add(log_ds, log_1mdt), T{-1});
  if (form == EncoderLoss::kNonSaturating) {
    Var log_dt = g.mean(g.log(d_target));
    Var log_1mds = g.mean(g.log(complement(d_source)));
    out.enc = g.scale(g.add(log_dt, log_1mds), T{-1});
  } else {
    out.enc = g.add(log_ds, log_1mdt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// VAT

namespace {

// Per-sample L2 normalization of `v` to `radius`; rows with vanishing or
// non-finite norm take the corresponding row of `fallback` (already unit).
template <typename T>
std::size_t normalize_rows(Tensor<T>& v, const Tensor<T>& fallback, double radius) {
  const std::size_t N = v.dim(0), D = v.row_size();
  std::size_t fallbacks = 0;
  for (std::size_t n = 0; n < N; ++n) {
    T* row = v.ptr() + n * D;
    double norm2 = 0;
    for (std::size_t k = 0; k < D; ++k) norm2 += static_cast<double>(row[k]) * row[k];
    const double norm = std::sqrt(norm2);
    if (norm > 0 && std::isfinite(norm)) {
      for (std::size_t k = 0; k < D; ++k) row[k] = static_cast<T>(radius * (static_cast<double>(row[k]) / norm));
    } else {
      ++fallbacks;
      const T* f = fallback.ptr() + n * D;
      for (std::size_t k = 0; k < D; ++k) row[k] = static_cast<T>(radius * static_cast<double>(f[k]));
    }
  }
  return fallbacks;
}

template <typename T>
Tensor<T> random_unit_rows(const Shape& shape, std::uint64_t seed, std::uint64_t stream_key) {
  Tensor<T> d(shape);
  Rng rng = make_rng({seed, stream_key, 0x7a7du});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = static_cast<T>(normal(rng));
  const Tensor<T> none(shape, T{0});
  normalize_rows(d, none, 1.0);
  return d;
}

BuildOptions frozen(std::uint64_t stream_key) {
  BuildOptions o;
  o.stream_key = stream_key;
  o.update_stats = false;
  o.trainable = false;
  return o;
}

}  // namespace

template <typename T>
VatPerturbation<T> vat_perturbation(const ArchitectureSpec& spec, const ParameterStore<T>& params, const Tensor<T>& x,
                                    const VatConfig& cfg, std::uint64_t seed, std::uint64_t stream_key, Mode mode) {
  cfg.validate();
  if (x.rank() < 2 || x.dim(0) == 0) throw ShapeError("vat_perturbation: expected a non-empty batch");
  if (!x.all_finite()) throw NumericalError("vat_perturbation: input contains non-finite values");
  const Tensor<T> start = random_unit_rows<T>(x.shape(), seed, stream_key);

  Graph<T> g;
  Var xin = g.input(x.shape(), false, "x");
  Var din = g.input(x.shape(), true, "d");
  NetworkNodes clean = build_network(spec, mut(params), g, xin, frozen(stream_key));
  Var probe = g.add(xin, g.scale(din, static_cast<T>(cfg.xi)));
  NetworkNodes pert = build_network(spec, mut(params), g, probe, frozen(stream_key));
  Var kl = kl_mean(g, clean.output, pert.output);
  g.bind(xin, x);

  VatPerturbation<T> out;
  Tensor<T> d = start;
  for (int it = 0; it < cfg.power_iterations; ++it) {
    g.bind(din, d);
    g.forward(mode, seed);
    g.backward(kl);
    Tensor<T> grad = g.grad(din);
    const bool last = it + 1 == cfg.power_iterations;
    const std::size_t fb = normalize_rows(grad, d, last ? cfg.epsilon : 1.0);
    if (last) out.fallback_rows = fb;
    d = std::move(grad);
  }
  out.r = std::move(d);
  return out;
}

namespace {

template <typename T>
struct ClusterGraph {
  Graph<T> g;
  Var x, x_adv;
  NetworkNodes clean, pert;
  Var l_v, l_c;
};

template <typename T>
void build_cluster_graph(ClusterGraph<T>& cg, const Classifier<T>& c, const Shape& shape, std::uint64_t stream) {
  cg.x = cg.g.input(shape, false, "x");
  cg.x_adv = cg.g.input(shape, false, "x_adv");
  cg.clean = build_network(c.spec, mut(c.params), cg.g, cg.x, frozen(stream));
  cg.pert = build_network(c.spec, mut(c.params), cg.g, cg.x_adv, frozen(stream));
  cg.l_v = kl_mean(cg.g, cg.clean.output, cg.pert.output);
  cg.l_c = conditional_entropy(cg.g, cg.clean.output);
}

template <typename T>
Tensor<T> plus(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("perturbation shape " + to_string(b.shape()) + " vs input " +
                                               to_string(a.shape()));
  Tensor<T> out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b[k];
  return out;
}

}  // namespace

template <typename T>
double vat_loss(const Classifier<T>& c, const Tensor<T>& x, const Tensor<T>& r, std::uint64_t seed, Mode mode) {
  ClusterGraph<T> cg;
  build_cluster_graph(cg, c, x.shape(), kSourceStream);
  cg.g.bind(cg.x, x);
  cg.g.bind(cg.x_adv, plus(x, r));
  cg.g.forward(mode, seed);
  return static_cast<double>(cg.g.scalar(cg.l_v));
}

template <typename T>
TargetClusterLoss target_cluster_loss(const Classifier<T>& c, const Tensor<T>& x_t, const VatConfig& cfg,
                                      std::uint64_t seed, Mode mode) {
  if (x_t.rank() < 2 || x_t.dim(0) == 0) throw ShapeError("target_cluster_loss: empty target batch");
  const auto r = vat_perturbation(c.spec, c.params, x_t, cfg, seed, kTargetStream, mode);
  ClusterGraph<T> cg;
  build_cluster_graph(cg, c, x_t.shape(), kTargetStream);
  cg.g.bind(cg.x, x_t);
  cg.g.bind(cg.x_adv, plus(x_t, r.r));
  cg.g.forward(mode, seed);
  TargetClusterLoss out;
  out.l_v = static_cast<double>(cg.g.scalar(cg.l_v));
  out.l_c = static_cast<double>(cg.g.scalar(cg.l_c));
  out.total = out.l_v + out.l_c;
  return out;
}

// ---------------------------------------------------------------------------
// VadaObjective

template <typename T>
VadaObjective<T>::VadaObjective(Classifier<T>& c, Discriminator<T>* disc, const LossWeights& w, const VatConfig& vat,
                                ObjectiveOptions opt)
    : c_(c), d_(disc), w_(w), vat_(vat), opt_(opt) {
  w_.validate();
  if (uses_source_vat() || uses_target_vat()) vat_.validate();
  if (w_.lambda_d > 0 && d_ == nullptr) throw ConfigError("vada: lambda_d > 0 requires a discriminator");
  if (d_ != nullptr && d_->spec.input_shape != c_.spec.layer_shape(c_.spec.feature_split_index)) {
    throw ShapeError("vada: discriminator input " + to_string(d_->spec.input_shape) + " does not match features " +
                     to_string(c_.spec.layer_shape(c_.spec.feature_split_index)));
  }
}

template <typename T>
bool VadaObjective<T>::uses_target() const {
  return uses_discriminator() || (w_.lambda_t > 0 && (w_.target_entropy || w_.target_vat));
}

template <typename T>
void VadaObjective<T>::build(const Shape& xs_shape, const Shape& xt_shape) {
  if (g_ && xs_shape == xs_shape_ && xt_shape == xt_shape_) return;
  g_ = std::make_unique<Graph<T>>();
  Graph<T>& g = *g_;
  xs_shape_ = xs_shape;
  xt_shape_ = xt_shape;
  xs_ = xt_ = xs_adv_ = xt_adv_ = Var{};
  l_c_ = l_v_src_ = l_v_tgt_ = l_d_disc_ = l_d_enc_ = Var{};

  // Running statistics come from the domain that is evaluated: the target
  // whenever it is seen, the source only in source-only training.
  BuildOptions live;
  live.update_stats = opt_.update_stats && !uses_target();
  BuildOptions pert;

  xs_ = g.input(xs_shape, false, "x_source");
  ys_ = g.input({xs_shape[0], c_.spec.num_classes}, false, "y_source");
  live.stream_key = pert.stream_key = kSourceStream;
  NetworkNodes src = build_network(c_.spec, c_.params, g, xs_, live);
  l_y_ = cross_entropy(g, src.output, ys_);
  Var total = l_y_;
  if (uses_source_vat()) {
    xs_adv_ = g.input(xs_shape, false, "x_source_adv");
    NetworkNodes s_adv = build_network(c_.spec, c_.params, g, xs_adv_, pert);
    l_v_src_ = kl_mean(g, src.output, s_adv.output);
    total = weighted_add(g, total, l_v_src_, w_.lambda_s);
  }

  NetworkNodes tgt;
  if (uses_target()) {
    xt_ = g.input(xt_shape, false, "x_target");
    live.stream_key = pert.stream_key = kTargetStream;
    live.update_stats = opt_.update_stats;
    tgt = build_network(c_.spec, c_.params, g, xt_, live);
    l_c_ = conditional_entropy(g, tgt.output);
    if (w_.lambda_t > 0 && w_.target_entropy) total = weighted_add(g, total, l_c_, w_.lambda_t);
    if (uses_target_vat()) {
      xt_adv_ = g.input(xt_shape, false, "x_target_adv");
      NetworkNodes t_adv = build_network(c_.spec, c_.params, g, xt_adv_, pert);
      l_v_tgt_ = kl_mean(g, tgt.output, t_adv.output);
      total = weighted_add(g, total, l_v_tgt_, w_.lambda_t);
    }
  }

  if (uses_discriminator()) {
    BuildOptions disc_opt;
    Var ds = build_network(d_->spec, d_->params, g, g.detach(src.features), disc_opt).output;
    Var dt = build_network(d_->spec, d_->params, g, g.detach(tgt.features), disc_opt).output;
    l_d_disc_ = discriminator_losses(g, ds, dt, opt_.encoder_loss).disc;

    encoder_mark_ = g.mark();
    BuildOptions enc_opt;
    enc_opt.trainable = false;
    Var es = build_network(d_->spec, d_->params, g, src.features, enc_opt).output;
    Var et = build_network(d_->spec, d_->params, g, tgt.features, enc_opt).output;
    l_d_enc_ = discriminator_losses(g, es, et, opt_.encoder_loss).enc;
    total = weighted_add(g, total, l_d_enc_, w_.lambda_d);
  } else {
    encoder_mark_ = g.mark();
  }
  total_ = total;
}

template <typename T>
LossBreakdown VadaObjective<T>::evaluate(const Tensor<T>& xs, const Tensor<T>& ys, const Tensor<T>& xt,
                                         std::uint64_t seed) {
  std::optional<VatPerturbation<T>> rs, rt;
  std::size_t fb = 0;
  if (uses_source_vat()) {
    rs = vat_perturbation(c_.spec, c_.params, xs, vat_, seed, kSourceStream, opt_.mode);
    fb += rs->fallback_rows;
  }
  if (uses_target_vat()) {
    rt = vat_perturbation(c_.spec, c_.params, xt, vat_, seed, kTargetStream, opt_.mode);
    fb += rt->fallback_rows;
  }
  LossBreakdown b = evaluate_with(xs, ys, xt, rs ? &rs->r : nullptr, rt ? &rt->r : nullptr, seed);
  fallback_rows_ = fb;
  return b;
}

template <typename T>
LossBreakdown VadaObjective<T>::evaluate_with(const Tensor<T>& xs, const Tensor<T>& ys, const Tensor<T>& xt,
                                              const Tensor<T>* r_source, const Tensor<T>* r_target,
                                              std::uint64_t seed) {
  if (xs.rank() < 2 || xs.dim(0) == 0) throw ShapeError("vada: empty source batch");
  if (uses_target() && (xt.rank() < 2 || xt.dim(0) == 0)) throw ShapeError("vada: empty target batch");
  if (uses_discriminator() && xs.dim(0) != xt.dim(0)) {
    throw ShapeError("vada: source and target batches must have equal size");
  }
  build(xs.shape(), uses_target() ? xt.shape() : Shape{});
  Graph<T>& g = *g_;
  g.bind(xs_, xs);
  g.bind(ys_, ys);
  if (uses_source_vat()) {
    if (r_source == nullptr) throw UsageError("vada: source perturbation required");
    g.bind(xs_adv_, plus(xs, *r_source));
  }
  if (uses_target()) g.bind(xt_, xt);
  if (uses_target_vat()) {
    if (r_target == nullptr) throw UsageError("vada: target perturbation required");
    g.bind(xt_adv_, plus(xt, *r_target));
  }
  fallback_rows_ = 0;
  seed_ = seed;
  g.forward(opt_.mode, seed);
  last_ = read();
  return last_;
}

template <typename T>
LossBreakdown VadaObjective<T>::read() const {
  const Graph<T>& g = *g_;
  auto get = [&](Var v) { return v.valid() ? static_cast<double>(g.scalar(v)) : 0.0; };
  LossBreakdown b;
  b.l_y = get(l_y_);
  b.l_c = get(l_c_);
  b.l_v_src = get(l_v_src_);
  b.l_v_tgt = get(l_v_tgt_);
  b.l_d_disc = get(l_d_disc_);
  b.l_d_enc = get(l_d_enc_);
  b.total = vada_total(b, w_);
  return b;
}

template <typename T>
void VadaObjective<T>::backward_discriminator() {
  if (!uses_discriminator()) throw UsageError("vada: no discriminator in this objective");
  g_->backward(l_d_disc_);
}

template <typename T>
LossBreakdown VadaObjective<T>::refresh_encoder() {
  g_->forward(opt_.mode, seed_, encoder_mark_);
  last_ = read();
  return last_;
}

template <typename T>
void VadaObjective<T>::backward_total() {
  g_->backward(total_);
}

// ---------------------------------------------------------------------------
// DirttObjective

template <typename T>
DirttObjective<T>::DirttObjective(Classifier<T>& student, const Classifier<T>& teacher, const LossWeights& w,
                                  const VatConfig& vat, ObjectiveOptions opt)
    : student_(student), teacher_(teacher), w_(w), vat_(vat), opt_(opt) {
  w_.validate();
  vat_.validate();
  if (student_.spec.hash() != teacher_.spec.hash() || !student_.params.same_layout(teacher_.params)) {
    throw ConfigError("dirt-t: teacher and student architectures differ");
  }
}

template <typename T>
void DirttObjective<T>::build(const Shape& xt_shape) {
  if (g_ && xt_shape == xt_shape_) return;
  g_ = std::make_unique<Graph<T>>();
  Graph<T>& g = *g_;
  xt_shape_ = xt_shape;
  xt_ = g.input(xt_shape, false, "x_target");
  xt_adv_ = g.input(xt_shape, false, "x_target_adv");

  BuildOptions live;
  live.stream_key = kTargetStream;
  live.update_stats = opt_.update_stats;
  NetworkNodes stu = build_network(student_.spec, student_.params, g, xt_, live);
  BuildOptions pert;
  pert.stream_key = kTargetStream;
  NetworkNodes adv = build_network(student_.spec, student_.params, g, xt_adv_, pert);
  BuildOptions teach = frozen(kTeacherStream);
  teach.force_eval = true;
  NetworkNodes tch = build_network(teacher_.spec, mut(teacher_.params), g, xt_, teach);

  l_c_ = conditional_entropy(g, stu.output);
  l_v_ = kl_mean(g, stu.output, adv.output);
  l_kl_ = kl_mean(g, tch.output, stu.output);
  total_ = weighted_add(g, g.scale(g.add(l_v_, l_c_), static_cast<T>(w_.lambda_t)), l_kl_, w_.beta);
}

template <typename T>
LossBreakdown DirttObjective<T>::evaluate(const Tensor<T>& xt, std::uint64_t seed) {
  const auto r = vat_perturbation(student_.spec, student_.params, xt, vat_, seed, kTargetStream, opt_.mode);
  LossBreakdown b = evaluate_with(xt, r.r, seed);
  fallback_rows_ = r.fallback_rows;
  return b;
}

template <typename T>
LossBreakdown DirttObjective<T>::evaluate_with(const Tensor<T>& xt, const Tensor<T>& r_target, std::uint64_t seed) {
  if (xt.rank() < 2 || xt.dim(0) == 0) throw ShapeError("dirt-t: empty target batch");
  build(xt.shape());
  Graph<T>& g = *g_;
  g.bind(xt_, xt);
  g.bind(xt_adv_, plus(xt, r_target));
  fallback_rows_ = 0;
  g.forward(opt_.mode, seed);
  LossBreakdown b;
  b.l_c = static_cast<double>(g.scalar(l_c_));
  b.l_v_tgt = static_cast<double>(g.scalar(l_v_));
  b.l_kl_teacher = static_cast<double>(g.scalar(l_kl_));
  b.total = dirtt_total(b, w_);
  return b;
}

template <typename T>
void DirttObjective<T>::backward_total() {
  g_->backward(total_);
}

template <typename T>
LossBreakdown vada_objective(Classifier<T>& c, Discriminator<T>* disc, const Tensor<T>& xs, const Tensor<T>& ys,
                             const Tensor<T>& xt, const LossWeights& w, const VatConfig& vat, std::uint64_t seed,
                             ObjectiveOptions opt) {
  VadaObjective<T> obj(c, disc, w, vat, opt);
  return obj.evaluate(xs, ys, xt, seed);
}

template <typename T>
LossBreakdown dirtt_objective(Classifier<T>& student, const Classifier<T>& teacher, const Tensor<T>& xt,
                              const LossWeights& w, const VatConfig& vat, std::uint64_t seed, ObjectiveOptions opt) {
  DirttObjective<T> obj(student, teacher, w, vat, opt);
  return obj.evaluate(xt, seed);
}

#define CADP_INSTANTIATE(T)                                                                                        \
  template double cross_entropy<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template double conditional_entropy<T>(const Tensor<T>&);                                                        \
  template double kl_mean<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Var cross_entropy<T>(Graph<T>&, Var, Var);                                                              \
  template Var conditional_entropy<T>(Graph<T>&, Var);                                                             \
  template Var kl_mean<T>(Graph<T>&, Var, Var);                                                                    \
  template DiscriminatorLossVars discriminator_losses<T>(Graph<T>&, Var, Var, EncoderLoss);                       \
  template VatPerturbation<T> vat_perturbation<T>(const ArchitectureSpec&, const ParameterStore<T>&,              \
                                                  const Tensor<T>&, const VatConfig&, std::uint64_t,             \
                                                  std::uint64_t, Mode);                                          \
  template double vat_loss<T>(const Classifier<T>&, const Tensor<T>&, const Tensor<T>&, std::uint64_t, Mode);     \
  template TargetClusterLoss target_cluster_loss<T>(const Classifier<T>&, const Tensor<T>&, const VatConfig&,     \
                                                    std::uint64_t, Mode);                                        \
  template class VadaObjective<T>;                                                                                 \
  template class DirttObjective<T>;                                                                                \
  template LossBreakdown vada_objective<T>(Classifier<T>&, Discriminator<T>*, const Tensor<T>&, const Tensor<T>&, \
                                           const Tensor<T>&, const LossWeights&, const VatConfig&, std::uint64_t, \
                                           ObjectiveOptions);                                                     \
  template LossBreakdown dirtt_objective<T>(Classifier<T>&, const Classifier<T>&, const Tensor<T>&,               \
                                            const LossWeights&, const VatConfig&, std::uint64_t, ObjectiveOptions);

CADP_INSTANTIATE(float)
CADP_INSTANTIATE(double)

#undef CADP_INSTANTIATE

}  // namespace cadp
