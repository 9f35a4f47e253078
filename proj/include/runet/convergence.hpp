#pragma once

// Convergence traces of the GLD solvers against the closed-form solution,
// the data behind `runet denoise`.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "runet/graph_denoise.hpp"
#include "runet/matrix.hpp"
#include "runet/random.hpp"

namespace runet {

struct ConvergenceTrace {
  std::vector<std::string> solvers;
  std::vector<std::vector<double>> error;  // error[k][s] = ‖Y_k − Y*‖_F, k = 0 is the start
  double x_norm = 0.0;
};

/// Random instance: X uniform in [0, 2] (so Y* ≥ 0 and the projected solver
/// shares the fixed point), symmetric affinity uniform in [0, 1].
inline GldProblem make_denoise_problem(std::size_t n, std::size_t d, std::uint64_t seed, double epsilon, double p) {
  Rng rng = Rng::stream(seed, 0xDE);
  GldProblem prob;
  prob.X = rng.uniform_matrix(n, d, 0.0, 2.0);
  prob.A = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) prob.A(i, j) = prob.A(j, i) = rng.uniform();
  prob.epsilon = epsilon;
  prob.p = p;
  prob.validate();
  return prob;
}

/// Solvers, all started at Y₀ = X and measured against the random-walk
/// closed form (2I − Ã)Y* = X:
///   gradient    Y − 2α[(L + I)Y − X] with α = 1/6
///   unrolled    (1/3)(ÃY + Y + X)
///   proximal    the unrolled step projected onto Y ≥ 0
///   reweighted  the unrolled step with Ã recomputed from A ⊙ Ω(Y) each step
inline ConvergenceTrace denoise_convergence(const GldProblem& prob, std::size_t iterations) {
  prob.validate();
  const LaplacianForm lap = make_laplacian(prob.A, LaplacianVariant::kRandomWalk);
  const DenseMatrix y_star = closed_form_solution(prob, lap);
  const DenseMatrix a_tilde = normalize_rows(prob.A);

  ConvergenceTrace out;
  out.solvers = {"gradient", "unrolled", "proximal", "reweighted"};
  out.x_norm = frobenius_norm(prob.X);
  std::vector<DenseMatrix> y(out.solvers.size(), prob.X);
  auto record = [&] {
    std::vector<double> row;
    for (const auto& m : y) row.push_back(frobenius_norm(m - y_star));
    out.error.push_back(std::move(row));
  };
  record();
  for (std::size_t k = 0; k < iterations; ++k) {
    y[0] = gradient_step(y[0], prob.X, lap, 1.0 / 6.0);
    y[1] = unrolled_step(y[1], prob.X, a_tilde);
    y[2] = proximal_unrolled_step(y[2], prob.X, a_tilde);
    const DenseMatrix weighted = normalize_rows(hadamard(prob.A, omega_matrix(y[3], prob.epsilon, prob.p)));
    y[3] = unrolled_step(y[3], prob.X, weighted);
    record();
  }
  return out;
}

}  // namespace runet
