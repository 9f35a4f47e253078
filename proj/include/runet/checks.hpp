#pragma once

// Numerical self-checks behind `runet check`: finite-difference gradients,
// GLD solver identities, the MM majorizer, and ℓ2,1 extremals.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "runet/autodiff.hpp"
#include "runet/diversity.hpp"
#include "runet/errors.hpp"
#include "runet/graph_denoise.hpp"
#include "runet/matrix.hpp"
#include "runet/model.hpp"
#include "runet/pipeline.hpp"
#include "runet/random.hpp"
#include "runet/synth_scene.hpp"

namespace runet {

// ---------------------------------------------------------------------------
// Finite differences

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradientCheck {
  std::vector<double> block_error;  // max relative error per input block
  double max_error = 0.0;
};

/// |a − n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dominating through rounding noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences for every input entry.
/// Stop-gradient values (Tape::frozen) are held at their unperturbed values.
inline GradientCheck gradient_check(const LossBuilder& build, const std::vector<DenseMatrix>& inputs, double h = 1e-5,
                                    std::optional<OpKind> sign_flip = std::nullopt) {
  std::vector<DenseMatrix> frozen;
  auto evaluate = [&](const std::vector<DenseMatrix>& xs) {
    Tape t;
    t.replay_frozen(frozen);
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(t.constant(x));
    return build(t, leaves).value()(0, 0);
  };

  Tape tape;
  tape.inject_sign_flip(sign_flip);
  std::vector<Var> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.variable(x));
  tape.backward(build(tape, leaves));
  frozen = tape.frozen_values();

  GradientCheck out;
  std::vector<DenseMatrix> probe = inputs;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const DenseMatrix analytic = leaves[b].grad();
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs[b].size(); ++i) {
      const double x0 = inputs[b][i];
      probe[b][i] = x0 + h;
      const double up = evaluate(probe);
      probe[b][i] = x0 - h;
      const double down = evaluate(probe);
      probe[b][i] = x0;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    out.block_error.push_back(worst);
    out.max_error = std::max(out.max_error, worst);
  }
  return out;
}

/// Σ_ij W_ij·out_ij with fixed random W, so every output entry matters.
inline Var random_projection(Var out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(hadamard(out, out.tape().constant(rng.uniform_matrix(out.rows(), out.cols(), -1.0, 1.0))));
}

/// Uniform entries in [−2, 2] kept at least `gap` away from 0.
inline DenseMatrix away_from_zero(std::size_t r, std::size_t c, Rng& rng, double gap = 0.05) {
  DenseMatrix m = rng.uniform_matrix(r, c, -2.0, 2.0);
  for (auto& v : m.data())
    if (std::abs(v) < gap) v = v < 0.0 ? -gap : gap;
  return m;
}

// ---------------------------------------------------------------------------
// Fixtures shared by checks, tests and the acceptance suite

/// A three-node scene with four scored pairs and a freshly initialised model.
struct TinyModelFixture {
  Dataset data;
  ModelParams params;
  std::vector<PairRef> pairs;
  TrainConfig config;
};

inline TinyModelFixture tiny_model_fixture(std::uint64_t seed = 5) {
  SynthConfig c;
  c.num_object_cats = 3;
  c.num_rel_cats = 4;
  c.min_nodes = 3;
  c.max_nodes = 3;
  c.feature_dim = 4;
  c.num_train = 4;
  c.num_val = 0;
  c.num_test = 0;
  c.relation_density = 0.8;
  c.annotation_drop_rate = 0.0;
  c.seed = seed;
  TinyModelFixture f;
  f.data = generate(c);
  f.config.ump.feature_dim = c.feature_dim;
  f.config.ump.num_layers = 2;
  f.config.tau = 0.1;
  f.config.grouping = GroupingVariant::kBatchGroups;
  Rng rng(seed);
  f.params = ModelParams::init(c.feature_dim, c.raw_dim(), c.num_object_cats, c.num_rel_cats,
                               count_frequency_bias(f.data.train, c.num_object_cats, c.num_rel_cats), rng);
  f.pairs = {{0, 1}, {1, 2}, {2, 0}, {0, 2}};
  return f;
}

/// The full training loss of the fixture's first scene as a function of the
/// seven parameter blocks.
inline LossBuilder tiny_model_loss(const TinyModelFixture& f) {
  return [&f](Tape& t, const std::vector<Var>& blocks) {
    const ModelVars vars = ModelVars::from_blocks(blocks);
    return batch_loss(t, vars, f.params, {&f.data.train[0]}, {f.pairs}, f.config).loss;
  };
}

inline std::vector<DenseMatrix> param_blocks(const ModelParams& p) {
  std::vector<DenseMatrix> out;
  for (const DenseMatrix* m : p.blocks()) out.push_back(*m);
  return out;
}

/// Nonnegative affinity with zero diagonal; symmetric when asked.
inline DenseMatrix random_affinity(std::size_t n, Rng& rng, bool symmetric) {
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && (!symmetric || j > i)) a(i, j) = rng.uniform(0.0, 1.0);
  if (symmetric)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
  return a;
}

/// Random row-stochastic matrix.
inline DenseMatrix random_stochastic(std::size_t n, std::size_t r, Rng& rng) {
  DenseMatrix p = rng.uniform_matrix(n, r, 0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < r; ++j) s += p(i, j);
    for (std::size_t j = 0; j < r; ++j) p(i, j) /= s;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Suites

struct CheckResult {
  std::string suite;
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return std::isfinite(max_error) && max_error <= tolerance; }
};

struct CheckOptions {
  std::optional<OpKind> sign_flip;  // fault injected into backward rules
  std::uint64_t seed = 11;
};

inline std::vector<CheckResult> check_gradients(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  Rng rng(opt.seed);
  auto run = [&](const std::string& name, const LossBuilder& f, const std::vector<DenseMatrix>& in, double tol) {
    out.push_back({"grad", name, gradient_check(f, in, 1e-5, opt.sign_flip).max_error, tol});
  };
  auto m = [&](std::size_t r, std::size_t c) { return rng.uniform_matrix(r, c, -2.0, 2.0); };

  run("matmul", [](Tape&, const std::vector<Var>& v) { return random_projection(matmul(v[0], v[1]), 1); },
      {m(3, 4), m(4, 2)}, 1e-5);
  run("linear", [](Tape&, const std::vector<Var>& v) { return random_projection(linear(v[0], v[1]), 2); },
      {m(3, 4), m(5, 4)}, 1e-5);
  run("add", [](Tape&, const std::vector<Var>& v) { return random_projection(add(v[0], v[1]), 3); }, {m(3, 4), m(3, 4)},
      1e-5);
  run("sub", [](Tape&, const std::vector<Var>& v) { return random_projection(sub(v[0], v[1]), 4); }, {m(3, 4), m(1, 4)},
      1e-5);
  run("hadamard", [](Tape&, const std::vector<Var>& v) { return random_projection(hadamard(v[0], v[1]), 5); },
      {m(3, 4), m(3, 4)}, 1e-5);
  run("hadamard_broadcast",
      [](Tape&, const std::vector<Var>& v) { return random_projection(hadamard(v[0], v[1]), 6); }, {m(3, 4), m(1, 4)},
      1e-5);
  run("scale", [](Tape&, const std::vector<Var>& v) { return random_projection(scale(v[0], -1.7), 7); }, {m(2, 3)},
      1e-5);
  run("relu", [](Tape&, const std::vector<Var>& v) { return random_projection(relu(v[0]), 8); },
      {away_from_zero(4, 3, rng)}, 1e-5);
  run("row_softmax", [](Tape&, const std::vector<Var>& v) { return random_projection(row_softmax(v[0]), 9); },
      {m(4, 5)}, 1e-5);
  run("row_softmax_masked",
      [](Tape&, const std::vector<Var>& v) {
        DenseMatrix keep(4, 4, 1.0);
        for (std::size_t i = 0; i < 4; ++i) keep(i, i) = 0.0;
        return random_projection(row_softmax(v[0], keep), 10);
      },
      {m(4, 4)}, 1e-5);
  run("concat_cols", [](Tape&, const std::vector<Var>& v) { return random_projection(concat_cols({v[0], v[1]}), 11); },
      {m(3, 2), m(3, 4)}, 1e-5);
  run("concat_rows",
      [](Tape&, const std::vector<Var>& v) {
        const std::vector<Var> parts{v[0], v[1]};
        return random_projection(concat_rows(parts), 12);
      },
      {m(2, 3), m(4, 3)}, 1e-5);
  run("gather_rows",
      [](Tape&, const std::vector<Var>& v) { return random_projection(gather_rows(v[0], {2, 0, 2, 1}), 13); },
      {m(3, 3)}, 1e-5);
  run("slice_rows", [](Tape&, const std::vector<Var>& v) { return random_projection(slice_rows(v[0], 1, 2), 14); },
      {m(4, 2)}, 1e-5);
  run("pair_scores",
      [](Tape&, const std::vector<Var>& v) { return random_projection(pair_scores(v[0], v[1], v[2]), 15); },
      {m(3, 1), m(3, 1), m(9, 1)}, 1e-5);
  run("cross_entropy", [](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], {0, 3, 1}); }, {m(3, 4)},
      1e-5);
  run("l21_norm",
      [](Tape&, const std::vector<Var>& v) { return l21_norm(row_softmax(v[0])); }, {m(5, 3)}, 1e-5);

  const TinyModelFixture fixture = tiny_model_fixture();
  run("model_loss", tiny_model_loss(fixture), param_blocks(fixture.params), 1e-4);
  return out;
}

/// ‖Y − X‖² + tr(YᵀLY) on the tape, for the stationarity form (I + L)Y = X.
inline Var trace_form_objective(Var y, const DenseMatrix& x, const DenseMatrix& l) {
  Tape& t = y.tape();
  Var r = sub(y, t.constant(x));
  return add(sum(hadamard(r, r)), sum(hadamard(y, matmul(t.constant(l), y))));
}

/// ‖Y − X‖² + Σ_{i≠j} A_ij‖y_i − y_j‖² on the tape.
inline Var pairwise_objective(Var y, const DenseMatrix& x, const DenseMatrix& a) {
  Tape& t = y.tape();
  const std::size_t n = y.rows();
  std::vector<std::size_t> from;
  std::vector<std::size_t> to;
  DenseMatrix w(n * (n - 1), y.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      for (std::size_t c = 0; c < y.cols(); ++c) w(from.size(), c) = a(i, j);
      from.push_back(i);
      to.push_back(j);
    }
  Var diff = sub(gather_rows(y, from), gather_rows(y, to));
  Var r = sub(y, t.constant(x));
  return add(sum(hadamard(r, r)), sum(hadamard(t.constant(std::move(w)), hadamard(diff, diff))));
}

inline std::vector<CheckResult> check_gld(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  Rng rng(opt.seed + 1);

  // Smoothed ℓp: branch agreement at |x| = ε.
  double value_gap = 0.0;
  double slope_gap = 0.0;
  for (double eps : {0.1, 0.5, 1.0})
    for (double p : {0.1, 0.3, 1.0, 2.0}) {
      const double inner = std::pow(eps, p - 2.0) * eps * eps;
      const double outer = (2.0 / p) * std::pow(eps, p) - ((2.0 - p) / p) * std::pow(eps, p);
      value_gap = std::max(value_gap, std::abs(inner - outer));
      slope_gap = std::max(slope_gap, std::abs(2.0 * std::pow(eps, p - 2.0) * eps - 2.0 * std::pow(eps, p - 1.0)));
      value_gap = std::max(value_gap, std::abs(smoothed_lp(eps, eps, p) - outer));
    }
  out.push_back({"gld", "lp_branch_values", value_gap, 1e-10});
  out.push_back({"gld", "lp_branch_slopes", slope_gap, 1e-10});
  double p2_gap = 0.0;
  for (double x : {-3.0, -0.4, 0.0, 0.25, 0.5, 0.7, 10.0}) p2_gap = std::max(p2_gap, std::abs(smoothed_lp(x, 0.5, 2.0) - x * x));
  out.push_back({"gld", "lp_p2_is_square", p2_gap, 0.0});

  // Closed form, unrolled fixed point, and the α = 1/6 identity.
  double residual = 0.0;
  double fixed_point = 0.0;
  double identity = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(19);
    const std::size_t d = 1 + rng.index(8);
    GldProblem prob{rng.uniform_matrix(n, d, -2.0, 2.0), random_affinity(n, rng, false)};
    const LaplacianForm lap = make_laplacian(prob.A, LaplacianVariant::kRandomWalk);
    const DenseMatrix y_star = closed_form_solution(prob, lap);
    const DenseMatrix lhs = matmul(DenseMatrix::identity(n) + lap.L, y_star);
    residual = std::max(residual, frobenius_norm(lhs - prob.X) / frobenius_norm(prob.X));
    const DenseMatrix a_tilde = normalize_rows(prob.A);
    DenseMatrix y = prob.X;
    for (int k = 0; k < 60; ++k) y = unrolled_step(y, prob.X, a_tilde);
    fixed_point = std::max(fixed_point, frobenius_norm(y - y_star) / frobenius_norm(prob.X));
    const DenseMatrix yk = rng.uniform_matrix(n, d, -2.0, 2.0);
    identity = std::max(identity, max_abs_diff(gradient_step(yk, prob.X, lap, 1.0 / 6.0), unrolled_step(yk, prob.X, a_tilde)));
  }
  out.push_back({"gld", "closed_form_residual", residual, 1e-10});
  out.push_back({"gld", "unrolled_reaches_closed_form", fixed_point, 1e-9});
  out.push_back({"gld", "gradient_step_equals_unrolled", identity, 1e-12});

  // Objective gradients against their analytic forms, symmetric A.
  double trace_gap = 0.0;
  double pairwise_gap = 0.0;
  double value_match = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    const std::size_t d = 1 + rng.index(4);
    GldProblem prob{rng.uniform_matrix(n, d, -2.0, 2.0), random_affinity(n, rng, true)};
    const LaplacianForm lap = make_laplacian(prob.A, LaplacianVariant::kCombinatorial);
    const DenseMatrix y = rng.uniform_matrix(n, d, -2.0, 2.0);
    const DenseMatrix base = 2.0 * y - 2.0 * prob.X;
    {
      Tape t;
      Var yv = t.variable(y);
      t.inject_sign_flip(opt.sign_flip);
      t.backward(trace_form_objective(yv, prob.X, lap.L));
      trace_gap = std::max(trace_gap, max_abs_diff(yv.grad(), 2.0 * matmul(lap.L, y) + base));
    }
    {
      Tape t;
      Var yv = t.variable(y);
      t.inject_sign_flip(opt.sign_flip);
      Var obj = pairwise_objective(yv, prob.X, prob.A);
      value_match = std::max(value_match, std::abs(obj.value()(0, 0) - gld_objective(y, prob, lap)));
      t.backward(obj);
      pairwise_gap = std::max(pairwise_gap, max_abs_diff(yv.grad(), 4.0 * matmul(lap.L, y) + base));
    }
  }
  out.push_back({"gld", "trace_form_gradient_2LY", trace_gap, 1e-8});
  out.push_back({"gld", "pairwise_objective_value", value_match, 1e-10});
  out.push_back({"gld", "pairwise_gradient_4LY", pairwise_gap, 1e-8});
  return out;
}

/// Gap of the anchored majorizer: [s(Y) − s(Y₀)] − [f(Y) − f(Y₀)].
inline double majorization_gap(const DenseMatrix& y, const DenseMatrix& anchor, const GldProblem& prob,
                               const LaplacianForm& lap) {
  return (mm_surrogate(y, anchor, prob, lap) - mm_surrogate(anchor, anchor, prob, lap)) -
         (gld_lp_objective(y, prob, lap) - gld_lp_objective(anchor, prob, lap));
}

inline std::vector<CheckResult> check_mm(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  Rng rng(opt.seed + 2);
  const double ps[] = {0.1, 0.5, 1.0, 1.5, 2.0};
  const double epss[] = {0.1, 0.5, 1.0};
  double violation = 0.0;
  double tangency = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(5);
    const std::size_t d = 1 + rng.index(3);
    GldProblem prob{rng.uniform_matrix(n, d, -1.0, 1.0), random_affinity(n, rng, false), epss[rng.index(3)],
                    ps[rng.index(5)]};
    const LaplacianForm lap = make_laplacian(prob.A, LaplacianVariant::kCombinatorial);
    const DenseMatrix anchor = rng.uniform_matrix(n, d, -1.0, 1.0);
    const double step = std::pow(10.0, rng.uniform(-2.0, 0.5));
    const DenseMatrix y = anchor + step * rng.normal_matrix(n, d);
    violation = std::max(violation, -majorization_gap(y, anchor, prob, lap));
    tangency = std::max(tangency, std::abs(majorization_gap(anchor, anchor, prob, lap)));
  }
  out.push_back({"mm", "majorization_gap_violation", std::max(0.0, violation), 1e-10});
  out.push_back({"mm", "tangent_at_anchor", tangency, 1e-12});

  double increase = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.index(6);
    GldProblem prob{rng.uniform_matrix(n, 2, -2.0, 2.0), random_affinity(n, rng, false), 0.5, ps[rng.index(4)]};
    const LaplacianForm lap = make_laplacian(prob.A, LaplacianVariant::kCombinatorial);
    DenseMatrix y = prob.X;
    double f = gld_lp_objective(y, prob, lap);
    for (int k = 0; k < 30; ++k) {
      y = mm_step(y, prob, lap);
      const double next = gld_lp_objective(y, prob, lap);
      increase = std::max(increase, next - f);
      f = next;
    }
  }
  out.push_back({"mm", "outer_step_increase", std::max(0.0, increase), 1e-10});
  return out;
}

inline std::vector<CheckResult> check_l21(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  Rng rng(opt.seed + 3);
  double concentrated = 0.0;
  double uniform = 0.0;
  double balanced = 0.0;
  const std::pair<std::size_t, std::size_t> shapes[] = {{4, 2}, {8, 4}, {12, 3}};
  for (auto [n, r] : shapes) {
    DenseMatrix hot(n, r);
    DenseMatrix flat(n, r, 1.0 / static_cast<double>(r));
    DenseMatrix spread(n, r);
    for (std::size_t i = 0; i < n; ++i) {
      hot(i, 0) = 1.0;
      spread(i, i % r) = 1.0;
    }
    const double nd = static_cast<double>(n);
    concentrated = std::max(concentrated, std::abs(l21_norm(hot) - std::sqrt(nd)));
    uniform = std::max(uniform, std::abs(l21_norm(flat) - std::sqrt(nd)));
    balanced = std::max(balanced, std::abs(l21_norm(spread) - std::sqrt(nd * static_cast<double>(r))));
  }
  out.push_back({"l21", "concentrated_is_sqrt_N", concentrated, 1e-10});
  out.push_back({"l21", "uniform_is_sqrt_N", uniform, 1e-10});
  out.push_back({"l21", "balanced_is_sqrt_NR", balanced, 1e-10});
  double violation = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(20);
    const std::size_t r = 1 + rng.index(10);
    const double v = l21_norm(random_stochastic(n, r, rng));
    const double nd = static_cast<double>(n);
    const double rd = static_cast<double>(r);
    violation = std::max({violation, std::sqrt(nd / rd) - v, v - std::sqrt(nd * rd)});
  }
  out.push_back({"l21", "bounds_violation", std::max(0.0, violation), 1e-12});
  return out;
}

inline std::vector<CheckResult> run_checks(const std::string& suite, const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  auto append = [&](std::vector<CheckResult> part) { out.insert(out.end(), part.begin(), part.end()); };
  const bool all = suite == "all";
  if (!all && suite != "grad" && suite != "gld" && suite != "mm" && suite != "l21") {
    throw ParameterError("unknown check suite '" + suite + "' (expected grad, gld, mm, l21 or all)");
  }
  if (all || suite == "grad") append(check_gradients(opt));
  if (all || suite == "gld") append(check_gld(opt));
  if (all || suite == "mm") append(check_mm(opt));
  if (all || suite == "l21") append(check_l21(opt));
  return out;
}

inline std::optional<OpKind> parse_op_kind(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(OpKind::kL21Norm); ++k) {
    const auto kind = static_cast<OpKind>(k);
    if (name == op_name(kind)) return kind;
  }
  throw ParameterError("unknown op '" + name + "'");
}

}  // namespace runet
