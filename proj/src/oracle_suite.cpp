#include "cadp/oracle_suite.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "cadp/gradcheck.hpp"
#include "cadp/graph.hpp"
#include "cadp/network.hpp"
#include "cadp/objectives.hpp"
#include "cadp/rng.hpp"

namespace cadp {

namespace {

constexpr double kStep = 1e-6;  // central-difference step, always in double

// Every generated value is float-representable, so float and double
// instances of one case see identical inputs.
double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

enum class Fill { kNormal, kAwayFromZero, kDistinct, kPositive };

template <typename T>
Tensor<T> make_values(const Shape& shape, Fill fill, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor<T> t(shape);
  const std::size_t n = t.size();
  if (fill == Fill::kDistinct) {
    // A permutation of values 0.05 apart keeps every max-pool window's
    // winner stable under the difference step.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<T>(round_to_float(0.05 * static_cast<double>(perm[i]) - 0.025 * static_cast<double>(n)));
    }
    return t;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    switch (fill) {
      case Fill::kNormal: v = normal(rng); break;
      case Fill::kAwayFromZero: v = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.2 + unit(rng)); break;
      case Fill::kPositive: v = 0.5 + 1.5 * unit(rng); break;
      case Fill::kDistinct: break;
    }
    t[i] = static_cast<T>(round_to_float(v));
  }
  return t;
}

template <typename T>
struct Problem {
  std::vector<std::string> names;
  std::vector<Tensor<T>*> probes;
  std::function<double()> loss;
  std::function<std::vector<Tensor<T>>()> gradient;
  // Extra structural check run after `gradient`; returns a failure reason.
  std::function<std::string()> extra;
  std::shared_ptr<void> owner;
};

// ---------------------------------------------------------------------------
// Single-operation problems: loss = sum(R * op(leaves)) for a fixed random R.

struct Leaf {
  Shape shape;
  Fill fill = Fill::kNormal;
  bool as_input = false;  // graph input with requires_grad instead of a parameter
};

template <typename T>
using OpBuilder = std::function<Var(Graph<T>&, const std::vector<Var>&)>;

template <typename T>
struct OpOwner {
  Graph<T> g;
  std::deque<Parameter<T>> params;
  std::deque<Tensor<T>> inputs;
  std::vector<Var> vars;
  Var loss;
};

template <typename T>
Problem<T> op_problem(const std::vector<Leaf>& leaves, const OpBuilder<T>& build, Mode mode, std::uint64_t seed,
                      std::function<std::string(OpOwner<T>&)> extra = {}) {
  auto o = std::make_shared<OpOwner<T>>();
  Problem<T> p;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Tensor<T> v = make_values<T>(leaves[i].shape, leaves[i].fill, derive_seed({seed, i}));
    p.names.push_back("leaf" + std::to_string(i));
    if (leaves[i].as_input) {
      o->inputs.push_back(std::move(v));
      Var x = o->g.input(leaves[i].shape, true, p.names.back());
      o->g.bind(x, o->inputs.back());
      o->vars.push_back(x);
      p.probes.push_back(&o->inputs.back());
    } else {
      o->params.emplace_back(std::move(v));
      o->vars.push_back(o->g.parameter(o->params.back()));
      p.probes.push_back(&o->params.back().value);
    }
  }
  Var out = build(o->g, o->vars);
  Var weights = o->g.constant(make_values<T>(o->g.shape(out), Fill::kNormal, derive_seed({seed, 0xeeu})));
  o->loss = o->g.sum(o->g.mul(out, weights));
  OpOwner<T>* raw = o.get();
  auto rebind = [raw, leaves] {
    std::size_t k = 0;
    for (std::size_t i = 0; i < leaves.size(); ++i)
      if (leaves[i].as_input) raw->g.bind(raw->vars[i], raw->inputs[k++]);
  };
  p.loss = [raw, rebind, mode, seed] {
    rebind();
    raw->g.forward(mode, seed);
    return static_cast<double>(raw->g.scalar(raw->loss));
  };
  p.gradient = [raw, rebind, leaves, mode, seed] {
    rebind();
    raw->g.forward(mode, seed);
    raw->g.backward(raw->loss);
    std::vector<Tensor<T>> grads;
    std::size_t k = 0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (leaves[i].as_input) {
        grads.push_back(raw->g.grad(raw->vars[i]));
        ++k;
      } else {
        grads.push_back(raw->params[i - k].grad);
      }
    }
    return grads;
  };
  if (extra) p.extra = [raw, extra] { return extra(*raw); };
  p.owner = o;
  return p;
}

// ---------------------------------------------------------------------------
// Composite objectives on a 2-input MLP.

template <typename T>
Classifier<T> rounded_mlp(std::uint64_t seed) {
  Classifier<double> ref = build_mlp<double>({8, 8}, 2, seed);
  Classifier<T> c = build_mlp<T>({8, 8}, 2, seed);
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const auto& src = ref.params.entry(i).param.value;
    auto& dst = c.params.entry(i).param.value;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<T>(round_to_float(src[k]));
  }
  return c;
}

template <typename T>
Discriminator<T> rounded_discriminator(const Shape& feature_shape, std::uint64_t seed) {
  Discriminator<double> ref = build_discriminator<double>(feature_shape, seed);
  Discriminator<T> d = build_discriminator<T>(feature_shape, seed);
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    const auto& src = ref.params.entry(i).param.value;
    auto& dst = d.params.entry(i).param.value;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<T>(round_to_float(src[k]));
  }
  return d;
}

template <typename T>
Tensor<T> add_tensors(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b[k];
  return out;
}

template <typename T>
std::vector<double> column(const Tensor<T>& t) {
  return std::vector<double>(t.vec().begin(), t.vec().end());
}

// Shared data for the objective problems.
template <typename T>
struct ObjectiveOwner {
  Classifier<T> c;
  Classifier<T> teacher;
  Discriminator<T> d;
  Tensor<T> xs, xt, ys, rs, rt;
  Tensor<T> ps0, pt0;  // clean predictions at the unperturbed parameters
  LossWeights w;
  VatConfig vat;
  ObjectiveOptions opt;
  std::unique_ptr<VadaObjective<T>> vada;
  std::unique_ptr<DirttObjective<T>> dirtt;
  Graph<T> g;
  Var loss;
};

template <typename T>
std::shared_ptr<ObjectiveOwner<T>> objective_owner(std::uint64_t seed) {
  auto o = std::make_shared<ObjectiveOwner<T>>();
  o->c = rounded_mlp<T>(derive_seed({seed, 1}));
  o->teacher = rounded_mlp<T>(derive_seed({seed, 1}));
  {
    const Tensor<T> jitter = make_values<T>({1024}, Fill::kNormal, derive_seed({seed, 2}));
    std::size_t j = 0;
    for (auto& e : o->teacher.params)
      for (auto& v : e.param.value.data()) v = static_cast<T>(round_to_float(v + 0.1 * jitter[j++ % 1024]));
  }
  o->d = rounded_discriminator<T>(o->c.spec.layer_shape(o->c.spec.feature_split_index), derive_seed({seed, 3}));
  const std::size_t n = 6;
  o->xs = make_values<T>({n, 2}, Fill::kNormal, derive_seed({seed, 4}));
  o->xt = make_values<T>({n, 2}, Fill::kNormal, derive_seed({seed, 5}));
  for (auto& v : o->xt.data()) v = static_cast<T>(round_to_float(static_cast<double>(v) + 1.0));
  o->ys = Tensor<T>({n, 2});
  for (std::size_t i = 0; i < n; ++i) o->ys.at(i, i % 2) = T{1};
  o->rs = make_values<T>({n, 2}, Fill::kNormal, derive_seed({seed, 6}));
  o->rt = make_values<T>({n, 2}, Fill::kNormal, derive_seed({seed, 7}));
  for (auto& v : o->rs.data()) v = static_cast<T>(round_to_float(0.3 * v));
  for (auto& v : o->rt.data()) v = static_cast<T>(round_to_float(0.3 * v));
  o->ps0 = forward(o->c, o->xs);
  o->pt0 = forward(o->c, o->xt);
  o->w = LossWeights{};
  o->w.lambda_d = 0.5;
  o->w.lambda_s = 0.7;
  o->w.lambda_t = 0.3;
  o->w.beta = 0.4;
  o->vat.epsilon = 0.3;
  o->opt.update_stats = false;
  return o;
}

template <typename T>
std::vector<Tensor<T>*> trainable_values(ParameterStore<T>& store, std::vector<std::string>& names,
                                         const std::string& prefix) {
  std::vector<Tensor<T>*> out;
  for (auto& e : store) {
    if (!e.param.trainable) continue;
    names.push_back(prefix + e.name);
    out.push_back(&e.param.value);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> trainable_grads(const ParameterStore<T>& store) {
  std::vector<Tensor<T>> out;
  for (const auto& e : store)
    if (e.param.trainable) out.push_back(e.param.grad);
  return out;
}

template <typename T>
double disc_value(ObjectiveOwner<T>& o, EncoderLoss form, bool disc_side) {
  const Tensor<T> fs = forward_split(o.c, o.xs).features;
  const Tensor<T> ft = forward_split(o.c, o.xt).features;
  const auto ds = column(predict(o.d.spec, o.d.params, fs));
  const auto dt = column(predict(o.d.spec, o.d.params, ft));
  const auto [disc, enc] = discriminator_losses(ds, dt, form);
  return disc_side ? disc : enc;
}

// A single graph-level loss of the classifier on one batch.
enum class SingleLoss { kCrossEntropy, kConditionalEntropy, kVat };

template <typename T>
Problem<T> single_loss_problem(SingleLoss which, std::uint64_t seed) {
  auto o = objective_owner<T>(seed);
  Problem<T> p;
  p.probes = trainable_values(o->c.params, p.names, "");
  ObjectiveOwner<T>* raw = o.get();
  BuildOptions opt;
  opt.stream_key = kSourceStream;
  Var x = raw->g.input(raw->xs.shape(), false, "x");
  raw->g.bind(x, raw->xs);
  NetworkNodes clean = build_network(raw->c.spec, raw->c.params, raw->g, x, opt);
  if (which == SingleLoss::kCrossEntropy) {
    raw->loss = cross_entropy(raw->g, clean.output, raw->g.constant(raw->ys));
    p.loss = [raw] { return cross_entropy(forward(raw->c, raw->xs), raw->ys); };
  } else if (which == SingleLoss::kConditionalEntropy) {
    raw->loss = conditional_entropy(raw->g, clean.output);
    p.loss = [raw] { return conditional_entropy(forward(raw->c, raw->xs)); };
  } else {
    Var xa = raw->g.constant(add_tensors(raw->xs, raw->rs));
    NetworkNodes pert = build_network(raw->c.spec, raw->c.params, raw->g, xa, opt);
    raw->loss = kl_mean(raw->g, clean.output, pert.output);
    p.loss = [raw] { return kl_mean(raw->ps0, forward(raw->c, add_tensors(raw->xs, raw->rs))); };
  }
  p.gradient = [raw] {
    raw->g.forward(Mode::kTrain, 0);
    raw->g.backward(raw->loss);
    return trainable_grads(raw->c.params);
  };
  p.owner = o;
  return p;
}

template <typename T>
Problem<T> encoder_side_problem(EncoderLoss form, std::uint64_t seed) {
  auto o = objective_owner<T>(seed);
  Problem<T> p;
  p.probes = trainable_values(o->c.params, p.names, "");
  ObjectiveOwner<T>* raw = o.get();
  Graph<T>& g = raw->g;
  BuildOptions opt;
  BuildOptions frozen;
  frozen.trainable = false;
  Var xs = g.input(raw->xs.shape(), false, "xs");
  Var xt = g.input(raw->xt.shape(), false, "xt");
  g.bind(xs, raw->xs);
  g.bind(xt, raw->xt);
  NetworkNodes ns = build_network(raw->c.spec, raw->c.params, g, xs, opt);
  NetworkNodes nt = build_network(raw->c.spec, raw->c.params, g, xt, opt);
  const std::size_t last = raw->d.spec.layers.size() - 1;
  Var ds = build_layers(raw->d.spec, raw->d.params, g, ns.features, 0, last, frozen).back();
  Var dt = build_layers(raw->d.spec, raw->d.params, g, nt.features, 0, last, frozen).back();
  raw->loss = discriminator_losses(g, ds, dt, form).enc;
  p.loss = [raw, form] { return disc_value(*raw, form, false); };
  p.gradient = [raw] {
    raw->g.forward(Mode::kTrain, 0);
    raw->g.backward(raw->loss);
    return trainable_grads(raw->c.params);
  };
  p.extra = [raw] {
    for (const auto& e : raw->d.params)
      for (auto v : e.param.grad.data())
        if (v != T{0}) return std::string("discriminator received gradient from the encoder loss");
    return std::string();
  };
  p.owner = o;
  return p;
}

template <typename T>
Problem<T> vada_problem(bool disc_side, std::uint64_t seed) {
  auto o = objective_owner<T>(seed);
  Problem<T> p;
  ObjectiveOwner<T>* raw = o.get();
  raw->vada = std::make_unique<VadaObjective<T>>(raw->c, &raw->d, raw->w, raw->vat, raw->opt);
  if (disc_side) {
    p.probes = trainable_values(o->d.params, p.names, "disc.");
    p.loss = [raw] { return disc_value(*raw, EncoderLoss::kNonSaturating, true); };
    p.gradient = [raw] {
      raw->vada->evaluate_with(raw->xs, raw->ys, raw->xt, &raw->rs, &raw->rt, 0);
      raw->vada->backward_discriminator();
      return trainable_grads(raw->d.params);
    };
  } else {
    p.probes = trainable_values(o->c.params, p.names, "");
    p.loss = [raw] {
      const LossWeights& w = raw->w;
      const Tensor<T> ps = forward(raw->c, raw->xs);
      const Tensor<T> pt = forward(raw->c, raw->xt);
      return cross_entropy(ps, raw->ys) + w.lambda_d * disc_value(*raw, EncoderLoss::kNonSaturating, false) +
             w.lambda_s * kl_mean(raw->ps0, forward(raw->c, add_tensors(raw->xs, raw->rs))) +
             w.lambda_t * (conditional_entropy(pt) + kl_mean(raw->pt0, forward(raw->c, add_tensors(raw->xt, raw->rt))));
    };
    p.gradient = [raw] {
      raw->vada->evaluate_with(raw->xs, raw->ys, raw->xt, &raw->rs, &raw->rt, 0);
      raw->vada->backward_total();
      return trainable_grads(raw->c.params);
    };
    p.extra = [raw] {
      // The reported total must agree with the value-level reconstruction.
      const LossBreakdown& b = raw->vada->breakdown();
      if (std::abs(b.total - vada_total(b, raw->w)) > 1e-5 * std::max(1.0, std::abs(b.total))) {
        return std::string("reported total differs from its components");
      }
      return std::string();
    };
  }
  p.owner = o;
  return p;
}

template <typename T>
Problem<T> dirtt_problem(std::uint64_t seed) {
  auto o = objective_owner<T>(seed);
  Problem<T> p;
  ObjectiveOwner<T>* raw = o.get();
  raw->dirtt = std::make_unique<DirttObjective<T>>(raw->c, raw->teacher, raw->w, raw->vat, raw->opt);
  p.probes = trainable_values(o->c.params, p.names, "");
  p.loss = [raw] {
    const LossWeights& w = raw->w;
    const Tensor<T> pt = forward(raw->c, raw->xt);
    return w.lambda_t * (conditional_entropy(pt) + kl_mean(raw->pt0, forward(raw->c, add_tensors(raw->xt, raw->rt)))) +
           w.beta * kl_mean(forward(raw->teacher, raw->xt), pt);
  };
  p.gradient = [raw] {
    raw->dirtt->evaluate_with(raw->xt, raw->rt, 0);
    raw->dirtt->backward_total();
    return trainable_grads(raw->c.params);
  };
  p.extra = [raw] {
    for (const auto& e : raw->teacher.params)
      for (auto v : e.param.grad.data())
        if (v != T{0}) return std::string("teacher received gradient");
    return std::string();
  };
  p.owner = o;
  return p;
}

// ---------------------------------------------------------------------------
// Registry

struct CaseDef {
  std::string name;
  std::string group;
  std::function<Problem<double>(std::uint64_t)> make_double;
  std::function<Problem<float>(std::uint64_t)> make_float;
};

// Instantiates a generic problem factory for both precisions.
template <typename F>
CaseDef make_case(std::string name, std::string group, F factory) {
  return CaseDef{std::move(name), std::move(group),
                 [factory](std::uint64_t s) { return factory.template operator()<double>(s); },
                 [factory](std::uint64_t s) { return factory.template operator()<float>(s); }};
}

template <typename F>
CaseDef op_case(std::string name, std::vector<Leaf> leaves, F build, Mode mode = Mode::kTrain) {
  return make_case(std::move(name), "op", [leaves, build, mode]<typename T>(std::uint64_t s) {
    return op_problem<T>(leaves, OpBuilder<T>([&build](Graph<T>& g, const std::vector<Var>& v) {
                           return build.template operator()<T>(g, v);
                         }),
                         mode, s);
  });
}

std::vector<CaseDef> registry() {
  std::vector<CaseDef> cases;
  const Fill N = Fill::kNormal, A = Fill::kAwayFromZero;

  cases.push_back(op_case("input", {{{3, 4}, N, true}, {{3, 4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.mul(v[0], v[1]); }));
  cases.push_back(op_case("matmul", {{{3, 4}, N}, {{4, 5}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1]); }));
  cases.push_back(op_case("add", {{{3, 4}, N}, {{3, 4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }));
  cases.push_back(op_case("add-row-broadcast", {{{3, 4}, N}, {{4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }));
  cases.push_back(op_case("add-scalar-broadcast", {{{3, 4}, N}, {{1}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }));
  cases.push_back(op_case("scale", {{{3, 4}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.scale(v[0], static_cast<T>(-1.75));
  }));
  cases.push_back(op_case("conv3x3", {{{2, 3, 5, 4}, N}, {{4, 3, 3, 3}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.conv3x3(v[0], v[1]); }));
  cases.push_back(op_case("maxpool2x2", {{{2, 2, 4, 6}, Fill::kDistinct}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.maxpool2x2(v[0]); }));
  cases.push_back(op_case("global-avg-pool", {{{2, 3, 4, 4}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.global_avg_pool(v[0]);
  }));
  cases.push_back(op_case("leaky-relu", {{{4, 5}, A}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.leaky_relu(v[0], static_cast<T>(0.1));
  }));
  cases.push_back(op_case("relu", {{{4, 5}, A}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.relu(v[0]); }));
  cases.push_back(op_case("sigmoid", {{{4, 5}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.sigmoid(v[0]); }));
  cases.push_back(op_case("softmax", {{{4, 5}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.softmax(v[0]); }));
  cases.push_back(op_case("log-softmax", {{{4, 5}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.log_softmax(v[0]); }));
  cases.push_back(op_case("mul", {{{3, 4}, N}, {{3, 4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.mul(v[0], v[1]); }));
  cases.push_back(op_case("sum", {{{3, 4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.sum(v[0]); }));
  cases.push_back(op_case("mean", {{{3, 4}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.mean(v[0]); }));
  cases.push_back(op_case("dropout-train", {{{4, 6}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.dropout(v[0], static_cast<T>(0.3), 5);
  }));
  cases.push_back(op_case(
      "dropout-eval", {{{4, 6}, N}},
      []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.dropout(v[0], static_cast<T>(0.3), 5); },
      Mode::kEval));
  cases.push_back(op_case("gaussian-noise", {{{4, 6}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.gaussian_noise(v[0], static_cast<T>(0.5), 6);
  }));
  // Batchnorm: leaves are x, gamma, beta; running buffers live in static
  // storage of the builder and are never updated (update_stats = false).
  auto bn = [](Shape x_shape, Mode mode) {
    const std::size_t c = x_shape[1];
    return make_case(std::string("batchnorm-") + (mode == Mode::kTrain ? "train" : "eval") + "-rank" +
                         std::to_string(x_shape.size()),
                     "op", [x_shape, c, mode]<typename T>(std::uint64_t s) {
                       auto stats = std::make_shared<std::pair<Parameter<T>, Parameter<T>>>(
                           Parameter<T>(make_values<T>({c}, Fill::kNormal, derive_seed({s, 0xb1u})), false),
                           Parameter<T>(make_values<T>({c}, Fill::kPositive, derive_seed({s, 0xb2u})), false));
                       Problem<T> p = op_problem<T>(
                           {{x_shape, Fill::kNormal}, {{c}, Fill::kPositive}, {{c}, Fill::kNormal}},
                           [stats](Graph<T>& g, const std::vector<Var>& v) {
                             return g.batchnorm(v[0], v[1], v[2], stats->first, stats->second, false);
                           },
                           mode, s);
                       auto inner = p.owner;
                       p.owner = std::make_shared<std::pair<std::shared_ptr<void>, std::shared_ptr<void>>>(inner, stats);
                       return p;
                     });
  };
  cases.push_back(bn({3, 2, 3, 4}, Mode::kTrain));
  cases.push_back(bn({5, 3}, Mode::kTrain));
  cases.push_back(bn({3, 2, 3, 4}, Mode::kEval));
  cases.push_back(op_case("instance-norm", {{{2, 3, 4, 5}, N}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.instance_norm(v[0]); }));
  cases.push_back(op_case("reshape", {{{2, 3, 4}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.reshape(v[0], Shape{6, 4});
  }));
  cases.push_back(op_case("concat", {{{2, 3}, N}, {{4, 3}, N}}, []<typename T>(Graph<T>& g, const std::vector<Var>& v) {
    return g.concat({v[0], v[1]});
  }));
  cases.push_back(op_case("log", {{{3, 4}, Fill::kPositive}},
                          []<typename T>(Graph<T>& g, const std::vector<Var>& v) { return g.log(v[0]); }));
  // detach: the first leaf enters only through a detached path, so its
  // gradient must be exactly zero; the finite difference over the second
  // leaf sees the detached value as a constant.
  cases.push_back(make_case("detach", "op", []<typename T>(std::uint64_t s) {
    Problem<T> p = op_problem<T>(
        {{{3, 4}, Fill::kNormal}, {{3, 4}, Fill::kNormal}},
        [](Graph<T>& g, const std::vector<Var>& v) { return g.mul(g.detach(g.sigmoid(v[0])), v[1]); }, Mode::kTrain,
        s, [](OpOwner<T>& o) {
          for (auto v : o.params[0].grad.data())
            if (v != T{0}) return std::string("gradient crossed a detach");
          return std::string();
        });
    // Probe only the second leaf.
    p.names.erase(p.names.begin());
    p.probes.erase(p.probes.begin());
    auto grad = p.gradient;
    p.gradient = [grad] {
      auto g = grad();
      g.erase(g.begin());
      return g;
    };
    return p;
  }));

  cases.push_back(make_case("cross-entropy", "objective", []<typename T>(std::uint64_t s) {
    return single_loss_problem<T>(SingleLoss::kCrossEntropy, s);
  }));
  cases.push_back(make_case("conditional-entropy", "objective", []<typename T>(std::uint64_t s) {
    return single_loss_problem<T>(SingleLoss::kConditionalEntropy, s);
  }));
  cases.push_back(make_case("vat-kl", "objective",
                            []<typename T>(std::uint64_t s) { return single_loss_problem<T>(SingleLoss::kVat, s); }));
  cases.push_back(make_case("domain-disc-side", "objective",
                            []<typename T>(std::uint64_t s) { return vada_problem<T>(true, s); }));
  cases.push_back(make_case("domain-enc-side-nonsaturating", "objective", []<typename T>(std::uint64_t s) {
    return encoder_side_problem<T>(EncoderLoss::kNonSaturating, s);
  }));
  cases.push_back(make_case("domain-enc-side-saturating", "objective", []<typename T>(std::uint64_t s) {
    return encoder_side_problem<T>(EncoderLoss::kSaturating, s);
  }));
  cases.push_back(
      make_case("vada-total", "objective", []<typename T>(std::uint64_t s) { return vada_problem<T>(false, s); }));
  cases.push_back(make_case("dirtt-total", "objective", []<typename T>(std::uint64_t s) { return dirtt_problem<T>(s); }));
  return cases;
}

template <typename T>
std::vector<Tensor<double>> to_double(const std::vector<Tensor<T>>& xs) {
  std::vector<Tensor<double>> out;
  for (const auto& x : xs) {
    Tensor<double> d(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) d[k] = static_cast<double>(x[k]);
    out.push_back(std::move(d));
  }
  return out;
}

// FNV-1a, so case seeds do not depend on the standard library.
std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

OracleCase run_case(const CaseDef& def, Precision precision, std::uint64_t seed) {
  OracleCase out;
  out.name = def.name;
  out.group = def.group;
  out.tolerance = precision == Precision::kDouble ? 1e-6 : 1e-3;
  const std::uint64_t case_seed = derive_seed({seed, name_hash(def.name)});
  try {
    Problem<double> ref = def.make_double(case_seed);
    std::vector<Tensor<double>> analytic;
    std::string extra;
    if (precision == Precision::kDouble) {
      analytic = ref.gradient();
      if (ref.extra) extra = ref.extra();
    } else {
      Problem<float> pf = def.make_float(case_seed);
      analytic = to_double(pf.gradient());
      if (pf.extra) extra = pf.extra();
    }
    std::vector<GradientProbe<double>> probes;
    for (std::size_t i = 0; i < ref.probes.size(); ++i) probes.push_back({ref.names[i], ref.probes[i]});
    auto numeric = finite_difference_gradient<double>([&] { return ref.loss(); }, probes, kStep);
    GradCheckReport r = compare_gradients(probes, analytic, numeric, out.tolerance);
    out.max_relative_error = r.max_relative_error;
    out.pass = r.pass && extra.empty();
    out.detail = extra;
  } catch (const std::exception& e) {
    out.pass = false;
    out.max_relative_error = std::numeric_limits<double>::infinity();
    out.detail = e.what();
  }
  return out;
}

}  // namespace

std::vector<std::string> oracle_case_names() {
  std::vector<std::string> names;
  for (const auto& c : registry()) names.push_back(c.name);
  return names;
}

OracleSuiteReport run_gradient_oracle_suite(Precision precision, std::uint64_t seed) {
  OracleSuiteReport rep;
  rep.precision = precision;
  rep.pass = true;
  for (const auto& def : registry()) {
    rep.cases.push_back(run_case(def, precision, seed));
    rep.pass = rep.pass && rep.cases.back().pass;
  }
  return rep;
}

}  // namespace cadp
