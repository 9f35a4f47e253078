#pragma once

// Graph Laplacian denoising: objectives, the dense closed-form solve, the
// unrolled gradient/proximal iterations, the smoothed ℓp penalty and the
// majorization weights Ω.
//
// The edge set is every ordered pair (i, j) with i ≠ j; the affinity matrix
// carries soft membership.

#include <cmath>
#include <cstddef>
#include <string>

#include "runet/errors.hpp"
#include "runet/matrix.hpp"

namespace runet {

inline void check_lp_params(double epsilon, double p) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("smoothed lp: epsilon must be > 0, got " + std::to_string(epsilon));
  }
  if (!(p > 0.0 && p <= 2.0)) throw ParameterError("smoothed lp: p must lie in (0, 2], got " + std::to_string(p));
}

/// κ_p^ε(x): ε^{p−2}x² inside [−ε, ε], (2/p)|x|^p − ((2−p)/p)ε^p outside.
inline double smoothed_lp(double x, double epsilon, double p) {
  check_lp_params(epsilon, p);
  const double ax = std::abs(x);
  if (ax <= epsilon) return std::pow(epsilon, p - 2.0) * ax * ax;
  return (2.0 / p) * std::pow(ax, p) - ((2.0 - p) / p) * std::pow(epsilon, p);
}

/// dκ/dx.
inline double smoothed_lp_derivative(double x, double epsilon, double p) {
  check_lp_params(epsilon, p);
  const double ax = std::abs(x);
  const double s = x < 0.0 ? -1.0 : 1.0;
  if (ax <= epsilon) return s * 2.0 * std::pow(epsilon, p - 2.0) * ax;
  return s * 2.0 * std::pow(ax, p - 1.0);
}

enum class LaplacianVariant { kCombinatorial, kRandomWalk };

struct GldProblem {
  DenseMatrix X;  // n×d noisy signals
  DenseMatrix A;  // n×n nonnegative affinity, zero diagonal
  double epsilon = 0.5;
  double p = 0.1;

  void validate() const {
    if (A.rows() != A.cols()) throw DimensionError("GldProblem: affinity must be square, got " + A.shape());
    if (A.rows() != X.rows()) {
      throw DimensionError("GldProblem: affinity " + A.shape() + " does not match signals " + X.shape());
    }
    for (std::size_t i = 0; i < A.rows(); ++i) {
      if (A(i, i) != 0.0) throw ParameterError("GldProblem: affinity diagonal must be zero");
      for (std::size_t j = 0; j < A.cols(); ++j)
        if (!(A(i, j) >= 0.0)) throw ParameterError("GldProblem: affinity entries must be >= 0");
    }
    check_lp_params(epsilon, p);
  }
};

struct LaplacianForm {
  LaplacianVariant variant = LaplacianVariant::kCombinatorial;
  DenseMatrix L;
  DenseMatrix D;
  /// Affinity the objectives read: A itself, or D⁻¹A for the random-walk form.
  DenseMatrix affinity;
};

/// D⁻¹A. A row with no neighbours becomes e_i.
inline DenseMatrix normalize_rows(const DenseMatrix& a) {
  DenseMatrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    if (s > 0.0) {
      for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) / s;
    } else {
      out(i, i) = 1.0;
    }
  }
  return out;
}

inline LaplacianForm make_laplacian(const DenseMatrix& a, LaplacianVariant variant) {
  if (a.rows() != a.cols()) throw DimensionError("make_laplacian: affinity must be square, got " + a.shape());
  const std::size_t n = a.rows();
  LaplacianForm f;
  f.variant = variant;
  f.D = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j);
    f.D(i, i) = s;
  }
  if (variant == LaplacianVariant::kCombinatorial) {
    f.L = f.D - a;
    f.affinity = a;
  } else {
    const DenseMatrix at = normalize_rows(a);
    f.L = DenseMatrix::identity(n) - at;
    f.affinity = at;
    for (std::size_t i = 0; i < n; ++i) f.affinity(i, i) = 0.0;
  }
  return f;
}

namespace detail {

inline void check_signal_shape(const DenseMatrix& y, const GldProblem& problem, const char* op) {
  if (!y.same_shape(problem.X)) {
    throw DimensionError(std::string(op) + ": Y " + y.shape() + " vs X " + problem.X.shape());
  }
}

inline void check_laplacian_shape(const LaplacianForm& lap, const DenseMatrix& y, const char* op) {
  if (lap.L.rows() != y.rows()) {
    throw DimensionError(std::string(op) + ": Laplacian " + lap.L.shape() + " vs Y " + y.shape());
  }
}

inline double fidelity(const DenseMatrix& y, const DenseMatrix& x) {
  const double f = frobenius_norm(y - x);
  return f * f;
}

}  // namespace detail

/// ‖Y − X‖_F² + Σ_{i≠j} A_ij ‖y_i − y_j‖².
inline double gld_objective(const DenseMatrix& y, const GldProblem& problem, const LaplacianForm& lap) {
  detail::check_signal_shape(y, problem, "gld_objective");
  detail::check_laplacian_shape(lap, y, "gld_objective");
  double reg = 0.0;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j) {
      if (i == j || lap.affinity(i, j) == 0.0) continue;
      const double r = row_distance(y, i, y, j);
      reg += lap.affinity(i, j) * r * r;
    }
  return detail::fidelity(y, problem.X) + reg;
}

/// ‖Y − X‖_F² + Σ_{i≠j} A_ij κ_p^ε(‖y_i − y_j‖).
inline double gld_lp_objective(const DenseMatrix& y, const GldProblem& problem, const LaplacianForm& lap) {
  detail::check_signal_shape(y, problem, "gld_lp_objective");
  detail::check_laplacian_shape(lap, y, "gld_lp_objective");
  check_lp_params(problem.epsilon, problem.p);
  double reg = 0.0;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j) {
      if (i == j || lap.affinity(i, j) == 0.0) continue;
      reg += lap.affinity(i, j) * smoothed_lp(row_distance(y, i, y, j), problem.epsilon, problem.p);
    }
  return detail::fidelity(y, problem.X) + reg;
}

/// Solves (I + L)Y = X by LU with partial pivoting.
inline DenseMatrix closed_form_solution(const GldProblem& problem, const LaplacianForm& lap) {
  detail::check_laplacian_shape(lap, problem.X, "closed_form_solution");
  return lu_solve(DenseMatrix::identity(lap.L.rows()) + lap.L, problem.X);
}

/// Y_k − 2α[(L + I)Y_k − Y_0].
inline DenseMatrix gradient_step(const DenseMatrix& yk, const DenseMatrix& y0, const LaplacianForm& lap, double alpha) {
  require_same_shape(yk, y0, "gradient_step");
  detail::check_laplacian_shape(lap, yk, "gradient_step");
  if (!(alpha > 0.0)) throw ParameterError("gradient_step: alpha must be > 0");
  const DenseMatrix residual = matmul(lap.L, yk) + yk - y0;
  return yk - (2.0 * alpha) * residual;
}

/// (1/3)(Ã Y_k + Y_k + Y_0): the α = 1/6 random-walk step written as message passing.
inline DenseMatrix unrolled_step(const DenseMatrix& yk, const DenseMatrix& y0, const DenseMatrix& a_tilde) {
  require_same_shape(yk, y0, "unrolled_step");
  if (a_tilde.rows() != yk.rows() || a_tilde.cols() != yk.rows()) {
    throw DimensionError("unrolled_step: attention " + a_tilde.shape() + " vs Y " + yk.shape());
  }
  return (1.0 / 3.0) * (matmul(a_tilde, yk) + yk + y0);
}

/// Proximal version: projects the unrolled step onto the nonnegative orthant.
inline DenseMatrix proximal_unrolled_step(const DenseMatrix& yk, const DenseMatrix& y0, const DenseMatrix& a_tilde) {
  DenseMatrix out = unrolled_step(yk, y0, a_tilde);
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

/// Ω_ij = ε^{p−2} when ‖y_i − y_j‖ ≤ ε, else ‖y_i − y_j‖^{p−2}. Diagonal is ε^{p−2}.
inline DenseMatrix omega_matrix(const DenseMatrix& y, double epsilon, double p) {
  check_lp_params(epsilon, p);
  const std::size_t n = y.rows();
  const double inner = std::pow(epsilon, p - 2.0);
  DenseMatrix out(n, n, inner);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double r = row_distance(y, i, y, j);
      const double w = r <= epsilon ? inner : std::pow(r, p - 2.0);
      out(i, j) = w;
      out(j, i) = w;
    }
  return out;
}

/// Quadratic majorizer of gld_lp_objective, tangent at `anchor`.
inline double mm_surrogate(const DenseMatrix& y, const DenseMatrix& anchor, const GldProblem& problem,
                           const LaplacianForm& lap) {
  detail::check_signal_shape(y, problem, "mm_surrogate");
  require_same_shape(y, anchor, "mm_surrogate");
  detail::check_laplacian_shape(lap, y, "mm_surrogate");
  const DenseMatrix omega = omega_matrix(anchor, problem.epsilon, problem.p);
  double reg = 0.0;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j) {
      if (i == j || lap.affinity(i, j) == 0.0) continue;
      const double r = row_distance(y, i, y, j);
      reg += lap.affinity(i, j) * omega(i, j) * r * r;
    }
  return detail::fidelity(y, problem.X) + reg;
}

/// Exact minimiser of the surrogate anchored at `anchor`: with W = A ⊙ Ω,
/// solves (I + L(W + Wᵀ))Y = X.
inline DenseMatrix mm_step(const DenseMatrix& anchor, const GldProblem& problem, const LaplacianForm& lap) {
  detail::check_signal_shape(anchor, problem, "mm_step");
  const std::size_t n = anchor.rows();
  const DenseMatrix omega = omega_matrix(anchor, problem.epsilon, problem.p);
  DenseMatrix w(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) w(i, j) = lap.affinity(i, j) * omega(i, j) + lap.affinity(j, i) * omega(j, i);
  const LaplacianForm sym = make_laplacian(w, LaplacianVariant::kCombinatorial);
  return lu_solve(DenseMatrix::identity(n) + sym.L, problem.X);
}

}  // namespace runet
