#pragma once

// Unrolled message passing. Each layer is one step of the graph-denoising
// solver: attention from 𝓗(Y) = w_aᵀ[y_i; y_j; u_ij], optional Ω reweighting
// of the raw scores, then the anchored (1/3)(Y + ÃY + Y₀) update and ReLU.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "runet/autodiff.hpp"
#include "runet/errors.hpp"
#include "runet/graph_denoise.hpp"
#include "runet/matrix.hpp"
#include "runet/random.hpp"

namespace runet {

enum class UmpVariant { kGmpBaseline, kUnrolled, kUnrolledReweighted };

inline const char* to_string(UmpVariant v) {
  switch (v) {
    case UmpVariant::kGmpBaseline: return "gmp_baseline";
    case UmpVariant::kUnrolled: return "unrolled";
    case UmpVariant::kUnrolledReweighted: return "unrolled_reweighted";
  }
  return "?";
}

inline UmpVariant parse_ump_variant(const std::string& s) {
  if (s == "gmp_baseline") return UmpVariant::kGmpBaseline;
  if (s == "unrolled") return UmpVariant::kUnrolled;
  if (s == "unrolled_reweighted") return UmpVariant::kUnrolledReweighted;
  throw ParameterError("unknown U-MP variant '" + s + "'");
}

struct UmpConfig {
  std::size_t num_layers = 5;
  UmpVariant variant = UmpVariant::kUnrolledReweighted;
  double epsilon = 0.5;
  double p = 0.1;
  std::size_t feature_dim = 64;

  void validate() const {
    if (num_layers < 1) throw ParameterError("UmpConfig: num_layers must be >= 1");
    if (feature_dim < 1) throw ParameterError("UmpConfig: feature_dim must be >= 1");
    check_lp_params(epsilon, p);
  }
};

/// Uniform(−1/√fan_in, 1/√fan_in) init for a (out × in) weight.
inline DenseMatrix init_weight(std::size_t out, std::size_t in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return rng.uniform_matrix(out, in, -bound, bound);
}

struct UmpParams {
  DenseMatrix w_a;   // 3d × 1
  DenseMatrix W_t;   // O × d
  DenseMatrix W_in;  // d × d_raw

  static UmpParams init(std::size_t d, std::size_t d_raw, std::size_t num_object_cats, Rng& rng) {
    UmpParams p;
    p.W_in = init_weight(d, d_raw, rng);
    // w_a acts on the 3d-long concatenation, so that is its fan-in.
    const double bound = 1.0 / std::sqrt(static_cast<double>(3 * d));
    p.w_a = rng.uniform_matrix(3 * d, 1, -bound, bound);
    p.W_t = init_weight(num_object_cats, d, rng);
    return p;
  }
};

/// U-MP parameters placed on a tape.
struct UmpVars {
  Var w_a;
  Var W_t;
  Var W_in;

  static UmpVars on(Tape& tape, const UmpParams& p, bool trainable = true) {
    auto put = [&](const DenseMatrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
    return {put(p.w_a), put(p.W_t), put(p.W_in)};
  }
};

struct AttentionState {
  DenseMatrix A_tilde;  // n×n, rows sum to 1
  DenseMatrix Omega;    // n×n, positive
  DenseMatrix Y;        // n×d
};

/// keep-mask for row_softmax with the diagonal excluded.
inline DenseMatrix self_exclusion_mask(std::size_t n) {
  DenseMatrix keep(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) keep(i, i) = 0.0;
  return keep;
}

/// Union features are stored n²×d, row i·n + j holding u_ij.
inline void check_union_features(const DenseMatrix& union_flat, std::size_t n, std::size_t d, const char* op) {
  if (union_flat.rows() != n * n || union_flat.cols() != d) {
    throw DimensionError(std::string(op) + ": union features " + union_flat.shape() + ", expected " +
                         DenseMatrix::shape_string(n * n, d));
  }
}

/// Raw scores [𝓗(Y)]_ij = w_aᵀ[y_i; y_j; u_ij]. The diagonal is computed but
/// must be excluded with self_exclusion_mask() before normalisation.
inline Var attention_scores(Var y, Var union_flat, Var w_a) {
  const std::size_t n = y.rows();
  const std::size_t d = y.cols();
  if (w_a.rows() != 3 * d || w_a.cols() != 1) {
    throw DimensionError("attention_scores: w_a " + w_a.value().shape() + ", expected " +
                         DenseMatrix::shape_string(3 * d, 1));
  }
  check_union_features(union_flat.value(), n, d, "attention_scores");
  Var subj = matmul(y, slice_rows(w_a, 0, d));
  Var obj = matmul(y, slice_rows(w_a, d, d));
  Var uni = matmul(union_flat, slice_rows(w_a, 2 * d, d));
  return pair_scores(subj, obj, uni);
}

inline DenseMatrix attention_scores(const DenseMatrix& y, const DenseMatrix& union_flat, const UmpParams& params) {
  Tape t;
  return attention_scores(t.constant(y), t.constant(union_flat), t.constant(params.w_a)).value();
}

struct LayerOutput {
  Var A_tilde;
  DenseMatrix Omega;
  Var Y;
};

/// One U-MP layer; the update rule is selected by config.variant. Ω is a
/// constant with respect to gradients.
inline LayerOutput ump_layer(Var yk, Var y0, Var union_flat, const UmpVars& params, const UmpConfig& config) {
  if (!yk.value().same_shape(y0.value())) {
    throw DimensionError("ump_layer: Y_k " + yk.value().shape() + " vs Y_0 " + y0.value().shape());
  }
  Tape& tape = yk.tape();
  const std::size_t n = yk.rows();
  if (n < 2) {
    LayerOutput out;
    out.A_tilde = tape.constant(DenseMatrix::identity(n));
    out.Omega = DenseMatrix(n, n, std::pow(config.epsilon, config.p - 2.0));
    if (config.variant == UmpVariant::kGmpBaseline) {
      out.Y = relu(add(yk, yk));
    } else {
      out.Y = relu(scale(add(add(yk, yk), y0), 1.0 / 3.0));
    }
    return out;
  }

  Var scores = attention_scores(yk, union_flat, params.w_a);
  LayerOutput out;
  if (config.variant == UmpVariant::kUnrolledReweighted) {
    Var omega = tape.frozen(omega_matrix(yk.value(), config.epsilon, config.p));
    out.Omega = omega.value();
    scores = hadamard(omega, scores);
  } else {
    out.Omega = DenseMatrix(n, n, 1.0);
  }
  out.A_tilde = row_softmax(scores, self_exclusion_mask(n));
  Var message = matmul(out.A_tilde, yk);
  if (config.variant == UmpVariant::kGmpBaseline) {
    out.Y = relu(add(yk, message));
  } else {
    out.Y = relu(scale(add(add(yk, message), y0), 1.0 / 3.0));
  }
  return out;
}

inline AttentionState ump_layer(const DenseMatrix& yk, const DenseMatrix& y0, const DenseMatrix& union_flat,
                                const UmpParams& params, const UmpConfig& config) {
  Tape t;
  const UmpVars vars = UmpVars::on(t, params, false);
  LayerOutput o = ump_layer(t.constant(yk), t.constant(y0), t.constant(union_flat), vars, config);
  return {o.A_tilde.value(), o.Omega, o.Y.value()};
}

/// Input projection followed by K layers, all anchored on the projected input.
inline Var run_ump(Var x_raw, Var union_flat, const UmpVars& params, const UmpConfig& config,
                   std::vector<LayerOutput>* trace = nullptr) {
  config.validate();
  if (x_raw.cols() != params.W_in.cols()) {
    throw DimensionError("run_ump: node inputs " + x_raw.value().shape() + " vs projection " +
                         params.W_in.value().shape());
  }
  Var y0 = linear(x_raw, params.W_in);
  Var y = y0;
  for (std::size_t k = 0; k < config.num_layers; ++k) {
    LayerOutput o = ump_layer(y, y0, union_flat, params, config);
    y = o.Y;
    if (trace) trace->push_back(std::move(o));
  }
  return y;
}

inline DenseMatrix run_ump(const DenseMatrix& x_raw, const DenseMatrix& union_flat, const UmpParams& params,
                           const UmpConfig& config) {
  Tape t;
  const UmpVars vars = UmpVars::on(t, params, false);
  return run_ump(t.constant(x_raw), t.constant(union_flat), vars, config).value();
}

/// t_i = softmax(W_t ŷ_i), one row per node.
inline Var classify_nodes(Var y_hat, Var w_t) { return row_softmax(linear(y_hat, w_t)); }

inline DenseMatrix classify_nodes(const DenseMatrix& y_hat, const DenseMatrix& w_t) {
  Tape t;
  return classify_nodes(t.constant(y_hat), t.constant(w_t)).value();
}

}  // namespace runet
