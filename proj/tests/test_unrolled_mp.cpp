#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "runet/autodiff.hpp"
#include "runet/errors.hpp"
#include "runet/graph_denoise.hpp"
#include "runet/random.hpp"
#include "runet/unrolled_mp.hpp"
#include "test_util.hpp"

using namespace runet;
using testutil::random_matrix;

namespace {

UmpParams random_params(std::size_t d, std::size_t d_raw, std::size_t o, std::uint64_t seed) {
  Rng rng(seed);
  return UmpParams::init(d, d_raw, o, rng);
}

UmpConfig config_for(UmpVariant v, std::size_t d, double p = 0.1) {
  UmpConfig c;
  c.variant = v;
  c.feature_dim = d;
  c.p = p;
  return c;
}

// [𝓗]_ij by explicit dot product.
double naive_score(const DenseMatrix& y, const DenseMatrix& u, const DenseMatrix& w_a, std::size_t i, std::size_t j) {
  const std::size_t n = y.rows();
  const std::size_t d = y.cols();
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) s += w_a(c, 0) * y(i, c) + w_a(d + c, 0) * y(j, c) + w_a(2 * d + c, 0) * u(i * n + j, c);
  return s;
}

// One layer written as loops: scores, optional Ω, masked softmax, update.
DenseMatrix naive_layer(const DenseMatrix& yk, const DenseMatrix& y0, const DenseMatrix& u, const DenseMatrix& w_a,
                        UmpVariant variant, double eps, double p) {
  const std::size_t n = yk.rows();
  const std::size_t d = yk.cols();
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      s[j] = naive_score(yk, u, w_a, i, j);
      if (variant == UmpVariant::kUnrolledReweighted) {
        double r = 0.0;
        for (std::size_t c = 0; c < d; ++c) r += (yk(i, c) - yk(j, c)) * (yk(i, c) - yk(j, c));
        r = std::sqrt(r);
        s[j] *= r <= eps ? std::pow(eps, p - 2) : std::pow(r, p - 2);
      }
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) z += std::exp(s[j] - mx);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) a(i, j) = std::exp(s[j] - mx) / z;
  }
  DenseMatrix out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double msg = 0.0;
      for (std::size_t j = 0; j < n; ++j) msg += a(i, j) * yk(j, c);
      const double v = variant == UmpVariant::kGmpBaseline ? yk(i, c) + msg : (yk(i, c) + msg + y0(i, c)) / 3.0;
      out(i, c) = std::max(v, 0.0);
    }
  return out;
}

}  // namespace

TEST(AttentionScores, ZeroWeightsGiveUniformNeighbours) {
  std::mt19937_64 gen(1);
  UmpParams p = random_params(3, 5, 2, 1);
  p.w_a = DenseMatrix(9, 1);
  const AttentionState s =
      ump_layer(random_matrix(4, 3, gen), random_matrix(4, 3, gen), random_matrix(16, 3, gen), p,
                config_for(UmpVariant::kUnrolled, 3));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s.A_tilde(i, j), i == j ? 0.0 : 1.0 / 3.0, 1e-15);
}

TEST(AttentionScores, TwoNodeDotProduct) {
  std::mt19937_64 gen(2);
  const UmpParams p = random_params(3, 5, 2, 2);
  const DenseMatrix y = random_matrix(2, 3, gen);
  const DenseMatrix u = random_matrix(4, 3, gen);
  const DenseMatrix s = attention_scores(y, u, p);
  EXPECT_NEAR(s(0, 1), naive_score(y, u, p.w_a, 0, 1), 1e-14);
  EXPECT_NEAR(s(1, 0), naive_score(y, u, p.w_a, 1, 0), 1e-14);
}

TEST(AttentionScores, NotSymmetricEvenWithSymmetricUnion) {
  std::mt19937_64 gen(3);
  const UmpParams p = random_params(3, 5, 2, 3);
  const DenseMatrix y = random_matrix(2, 3, gen);
  DenseMatrix u = random_matrix(4, 3, gen);
  for (std::size_t c = 0; c < 3; ++c) u(1 * 2 + 0, c) = u(0 * 2 + 1, c);
  const DenseMatrix s = attention_scores(y, u, p);
  EXPECT_NE(s(0, 1), s(1, 0));
}

TEST(AttentionScores, ShapeErrors) {
  const UmpParams p = random_params(3, 5, 2, 4);
  EXPECT_THROW(attention_scores(DenseMatrix(2, 3), DenseMatrix(3, 3), p), DimensionError);
  EXPECT_THROW(attention_scores(DenseMatrix(2, 4), DenseMatrix(4, 4), p), DimensionError);
}

TEST(UmpLayer, PTwoReweightedEqualsUnrolled) {
  std::mt19937_64 gen(5);
  const UmpParams p = random_params(4, 6, 3, 5);
  const DenseMatrix yk = random_matrix(5, 4, gen);
  const DenseMatrix y0 = random_matrix(5, 4, gen);
  const DenseMatrix u = random_matrix(25, 4, gen);
  const AttentionState a = ump_layer(yk, y0, u, p, config_for(UmpVariant::kUnrolledReweighted, 4, 2.0));
  const AttentionState b = ump_layer(yk, y0, u, p, config_for(UmpVariant::kUnrolled, 4));
  EXPECT_EQ(a.Y, b.Y);
  EXPECT_EQ(a.A_tilde, b.A_tilde);
  for (double w : a.Omega.data()) EXPECT_EQ(w, 1.0);
}

TEST(UmpLayer, MatchesScalarReimplementation) {
  std::mt19937_64 gen(6);
  for (auto v : {UmpVariant::kGmpBaseline, UmpVariant::kUnrolled, UmpVariant::kUnrolledReweighted}) {
    const UmpParams p = random_params(2, 4, 2, 6);
    const DenseMatrix yk = random_matrix(3, 2, gen);
    const DenseMatrix y0 = random_matrix(3, 2, gen);
    const DenseMatrix u = random_matrix(9, 2, gen);
    const AttentionState s = ump_layer(yk, y0, u, p, config_for(v, 2));
    EXPECT_LT(max_abs_diff(s.Y, naive_layer(yk, y0, u, p.w_a, v, 0.5, 0.1)), 1e-13) << to_string(v);
  }
}

TEST(UmpLayer, FixedPointIsReturnedUnchanged) {
  // Attention that ignores Y (only the union part of w_a is nonzero) makes Ã
  // independent of Y, so Y* = (2I − Ã)⁻¹Y₀ can be built by a dense solve.
  std::mt19937_64 gen(7);
  const std::size_t n = 5;
  const std::size_t d = 3;
  UmpParams p = random_params(d, 4, 2, 7);
  for (std::size_t c = 0; c < 2 * d; ++c) p.w_a(c, 0) = 0.0;
  const DenseMatrix u = random_matrix(n * n, d, gen);
  const DenseMatrix y0 = random_matrix(n, d, gen, 0.0, 2.0);
  const UmpConfig cfg = config_for(UmpVariant::kUnrolled, d);
  const DenseMatrix at = ump_layer(y0, y0, u, p, cfg).A_tilde;
  DenseMatrix y_star = testutil::naive_solve(2.0 * DenseMatrix::identity(n) - at, y0);
  for (double v : y_star.data()) ASSERT_GE(v, 0.0);
  EXPECT_LT(max_abs_diff(ump_layer(y_star, y0, u, p, cfg).Y, y_star), 1e-10);
}

TEST(UmpLayer, AttentionRowsSumToOneWithReweighting) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    const UmpParams p = random_params(4, 6, 3, 100 + trial);
    const AttentionState s = ump_layer(random_matrix(6, 4, gen), random_matrix(6, 4, gen), random_matrix(36, 4, gen), p,
                                       config_for(UmpVariant::kUnrolledReweighted, 4));
    for (std::size_t i = 0; i < 6; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        row += s.A_tilde(i, j);
        EXPECT_GE(s.A_tilde(i, j), 0.0);
        EXPECT_GT(s.Omega(i, j), 0.0);
      }
      EXPECT_EQ(s.A_tilde(i, i), 0.0);
      EXPECT_NEAR(row, 1.0, 1e-10);
    }
  }
}

TEST(UmpLayer, SingleNodeConvention) {
  const UmpParams p = random_params(2, 4, 2, 9);
  const DenseMatrix yk{{1.0, -4.0}};
  const DenseMatrix y0{{2.0, 1.0}};
  const DenseMatrix u(1, 2);
  const AttentionState un = ump_layer(yk, y0, u, p, config_for(UmpVariant::kUnrolled, 2));
  EXPECT_NEAR(un.Y(0, 0), (2.0 * 1.0 + 2.0) / 3.0, 1e-15);
  EXPECT_EQ(un.Y(0, 1), 0.0);
  const AttentionState gmp = ump_layer(yk, y0, u, p, config_for(UmpVariant::kGmpBaseline, 2));
  EXPECT_EQ(gmp.Y(0, 0), 2.0);
}

TEST(UmpLayer, GradientStepIdentityBeforeRelu) {
  // Shift inputs positive so the ReLU is inactive and the layer is its linear part.
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const UmpParams p = random_params(3, 4, 2, 200 + trial);
    const DenseMatrix yk = random_matrix(n, 3, gen, 5.0, 6.0);
    const DenseMatrix y0 = random_matrix(n, 3, gen, 5.0, 6.0);
    const AttentionState s = ump_layer(yk, y0, random_matrix(n * n, 3, gen), p, config_for(UmpVariant::kUnrolled, 3));
    const LaplacianForm lap = make_laplacian(s.A_tilde, LaplacianVariant::kRandomWalk);
    EXPECT_LT(max_abs_diff(gradient_step(yk, y0, lap, 1.0 / 6.0), s.Y), 1e-12);
  }
}

TEST(UmpLayer, GradientsMatchFiniteDifferences) {
  std::mt19937_64 gen(11);
  for (auto v : {UmpVariant::kGmpBaseline, UmpVariant::kUnrolled, UmpVariant::kUnrolledReweighted}) {
    const UmpConfig cfg = config_for(v, 3);
    const DenseMatrix u = random_matrix(16, 3, gen);
    const double err = testutil::fd_max_rel_error(
        [&](Tape& t, const std::vector<Var>& x) {
          UmpVars vars{x[2], t.constant(DenseMatrix(2, 3)), t.constant(DenseMatrix(3, 5))};
          return testutil::weighted_sum(ump_layer(x[0], x[1], t.constant(u), vars, cfg).Y, 3);
        },
        {random_matrix(4, 3, gen, 0.5, 2.0), random_matrix(4, 3, gen, 0.5, 2.0), random_matrix(9, 1, gen, -0.5, 0.5)});
    EXPECT_LT(err, 1e-5) << to_string(v);
  }
}

TEST(UmpLayer, SpuriousCrossClusterMassShrinksWithSmallP) {
  // Two tight clusters far apart; the cross pair (0, 3) gets a union feature
  // aligned with w_a so its raw score is large. Measured on node 0's row.
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t n = 6;
    const std::size_t d = 4;
    UmpParams p = random_params(d, 4, 2, seed + 1000);
    DenseMatrix y(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) y(i, c) = (i < 3 ? 0.0 : 3.0) + 0.1 * nd(gen);
    DenseMatrix u(n * n, d);
    for (auto& v : u.data()) v = 0.1 * nd(gen);
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += p.w_a(2 * d + c, 0) * p.w_a(2 * d + c, 0);
    for (std::size_t c = 0; c < d; ++c) u(0 * n + 3, c) = 5.0 * p.w_a(2 * d + c, 0) / norm;
    auto cross_mass = [&](double pp) {
      const AttentionState s = ump_layer(y, y, u, p, config_for(UmpVariant::kUnrolledReweighted, d, pp));
      double m = 0.0;
      for (std::size_t j = 3; j < n; ++j) m += s.A_tilde(0, j);
      return m;
    };
    wins += cross_mass(0.1) < cross_mass(2.0) ? 1 : 0;
  }
  EXPECT_GE(wins, 95);
}

TEST(UmpLayer, FixedAttentionIterationIsCauchy) {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 20; ++trial) {
    const UmpParams p = random_params(3, 4, 2, 300 + trial);
    const DenseMatrix y0 = random_matrix(6, 3, gen, 0.0, 2.0);
    const DenseMatrix at =
        ump_layer(y0, y0, random_matrix(36, 3, gen), p, config_for(UmpVariant::kUnrolled, 3)).A_tilde;
    DenseMatrix y = y0;
    double prev = 1e300;
    for (int k = 0; k < 40; ++k) {
      const DenseMatrix next = proximal_unrolled_step(y, y0, at);
      const double step = frobenius_norm(next - y);
      EXPECT_LE(step, prev + 1e-14);
      prev = step;
      y = next;
    }
    EXPECT_LT(prev, 1e-6);
  }
}

TEST(RunUmp, OneLayerEqualsUmpLayer) {
  std::mt19937_64 gen(13);
  const UmpParams p = random_params(3, 5, 2, 13);
  const DenseMatrix x = random_matrix(4, 5, gen);
  const DenseMatrix u = random_matrix(16, 3, gen);
  UmpConfig cfg = config_for(UmpVariant::kUnrolledReweighted, 3);
  cfg.num_layers = 1;
  const DenseMatrix y0 = matmul(x, transpose(p.W_in));
  EXPECT_LT(max_abs_diff(run_ump(x, u, p, cfg), ump_layer(y0, y0, u, p, cfg).Y), 1e-15);
}

TEST(RunUmp, NonnegativeAndDeterministic) {
  std::mt19937_64 gen(14);
  const UmpParams p = random_params(4, 6, 3, 14);
  const DenseMatrix x = random_matrix(7, 6, gen);
  const DenseMatrix u = random_matrix(49, 4, gen);
  const UmpConfig cfg = config_for(UmpVariant::kUnrolledReweighted, 4);
  const DenseMatrix a = run_ump(x, u, p, cfg);
  for (double v : a.data()) EXPECT_GE(v, 0.0);
  EXPECT_EQ(run_ump(x, u, p, cfg), a);
}

TEST(RunUmp, RejectsBadShapesAndConfig) {
  const UmpParams p = random_params(3, 5, 2, 15);
  UmpConfig cfg = config_for(UmpVariant::kUnrolled, 3);
  EXPECT_THROW(run_ump(DenseMatrix(2, 4), DenseMatrix(4, 3), p, cfg), DimensionError);
  cfg.num_layers = 0;
  EXPECT_THROW(run_ump(DenseMatrix(2, 5), DenseMatrix(4, 3), p, cfg), ParameterError);
}

TEST(ClassifyNodes, ZeroWeightsGiveUniformRows) {
  std::mt19937_64 gen(16);
  const DenseMatrix t = classify_nodes(random_matrix(3, 4, gen), DenseMatrix(5, 4));
  for (double v : t.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(ClassifyNodes, RowsSumToOneAndArgmaxMatchesLogits) {
  std::mt19937_64 gen(17);
  const DenseMatrix y = random_matrix(6, 4, gen);
  const DenseMatrix w = random_matrix(5, 4, gen);
  const DenseMatrix t = classify_nodes(y, w);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    std::size_t best_t = 0;
    std::size_t best_l = 0;
    std::vector<double> logit(5, 0.0);
    for (std::size_t o = 0; o < 5; ++o) {
      for (std::size_t c = 0; c < 4; ++c) logit[o] += w(o, c) * y(i, c);
      s += t(i, o);
      if (t(i, o) > t(i, best_t)) best_t = o;
      if (logit[o] > logit[best_l]) best_l = o;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(best_t, best_l);
  }
}

TEST(UmpConfig, ParseVariantNames) {
  EXPECT_EQ(parse_ump_variant("gmp_baseline"), UmpVariant::kGmpBaseline);
  EXPECT_EQ(parse_ump_variant("unrolled"), UmpVariant::kUnrolled);
  EXPECT_EQ(parse_ump_variant("unrolled_reweighted"), UmpVariant::kUnrolledReweighted);
  EXPECT_THROW(parse_ump_variant("gat"), ParameterError);
}
