#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "runet/autodiff.hpp"
#include "runet/errors.hpp"
#include "test_util.hpp"

using namespace runet;
using testutil::fd_max_rel_error;
using testutil::random_matrix;
using testutil::weighted_sum;

namespace {

DenseMatrix ones(std::size_t r, std::size_t c) {
  DenseMatrix m(r, c);
  m.fill(1.0);
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  const DenseMatrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(matmul(t.constant(DenseMatrix::identity(2)), t.constant(m)).value(), m);
}

TEST(Matmul, HandArithmetic) {
  Tape t;
  Var r = matmul(t.constant({{1, 2}, {3, 4}}), t.constant({{1}, {1}}));
  EXPECT_EQ(r.value(), (DenseMatrix{{3}, {7}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(DenseMatrix(2, 3)), t.constant(DenseMatrix(2, 3)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(1);
  const double err = fd_max_rel_error([](Tape&, const std::vector<Var>& v) { return weighted_sum(matmul(v[0], v[1]), 7); },
                                      {random_matrix(3, 4, gen), random_matrix(4, 2, gen)});
  EXPECT_LT(err, 1e-6);
}

TEST(Elementwise, HadamardWithOnesIsIdentity) {
  Tape t;
  std::mt19937_64 gen(2);
  const DenseMatrix m = random_matrix(3, 3, gen);
  EXPECT_EQ(hadamard(t.constant(m), t.constant(ones(3, 3))).value(), m);
}

TEST(Elementwise, AddNegationGivesZero) {
  Tape t;
  std::mt19937_64 gen(3);
  const DenseMatrix m = random_matrix(2, 5, gen);
  EXPECT_EQ(add(t.constant(m), t.constant(-1.0 * m)).value(), DenseMatrix(2, 5));
}

TEST(Elementwise, GradientOfSumHadamardIsOtherFactor) {
  Tape t;
  std::mt19937_64 gen(4);
  const DenseMatrix bv = random_matrix(3, 2, gen);
  Var a = t.variable(random_matrix(3, 2, gen));
  Var b = t.constant(bv);
  t.backward(sum(hadamard(a, b)));
  EXPECT_EQ(a.grad(), bv);
}

TEST(Elementwise, RowBroadcastOverRows) {
  Tape t;
  Var r = add(t.constant({{1, 2}, {3, 4}}), t.constant({{10, 20}}));
  EXPECT_EQ(r.value(), (DenseMatrix{{11, 22}, {13, 24}}));
}

TEST(Elementwise, OtherMismatchesAreErrors) {
  Tape t;
  EXPECT_THROW(add(t.constant(DenseMatrix(2, 2)), t.constant(DenseMatrix(2, 3))), DimensionError);
  EXPECT_THROW(sub(t.constant(DenseMatrix(1, 2)), t.constant(DenseMatrix(2, 2))), DimensionError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 gen(5);
  for (auto kind : {ElementwiseKind::kAdd, ElementwiseKind::kSub, ElementwiseKind::kHadamard}) {
    const double same = fd_max_rel_error(
        [kind](Tape&, const std::vector<Var>& v) { return weighted_sum(elementwise(v[0], v[1], kind), 8); },
        {random_matrix(3, 4, gen), random_matrix(3, 4, gen)});
    const double bcast = fd_max_rel_error(
        [kind](Tape&, const std::vector<Var>& v) { return weighted_sum(elementwise(v[0], v[1], kind), 9); },
        {random_matrix(3, 4, gen), random_matrix(1, 4, gen)});
    EXPECT_LT(same, 1e-5);
    EXPECT_LT(bcast, 1e-5);
  }
}

TEST(Relu, ClampsNegatives) {
  Tape t;
  EXPECT_EQ(relu(t.constant({{-1, 2}})).value(), (DenseMatrix{{0, 2}}));
}

TEST(Relu, Idempotent) {
  Tape t;
  std::mt19937_64 gen(6);
  Var once = relu(t.constant(random_matrix(4, 4, gen)));
  EXPECT_EQ(relu(once).value(), once.value());
}

TEST(Relu, GradientMaskFollowsSign) {
  std::mt19937_64 gen(7);
  DenseMatrix x = random_matrix(5, 5, gen);
  for (auto& v : x.data())
    if (std::abs(v) < 1e-3) v = 0.5;
  Tape t;
  Var a = t.variable(x);
  t.backward(sum(relu(a)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(a.grad()[i], x[i] > 0 ? 1.0 : 0.0);
  EXPECT_LT(fd_max_rel_error([](Tape&, const std::vector<Var>& v) { return weighted_sum(relu(v[0]), 3); }, {x}), 1e-5);
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape t;
  Var a = t.variable({{0.0}});
  t.backward(sum(relu(a)));
  EXPECT_EQ(a.grad()(0, 0), 0.0);
}

TEST(RowSoftmax, SymmetricRowIsUniform) {
  Tape t;
  EXPECT_EQ(row_softmax(t.constant({{0, 0}})).value(), (DenseMatrix{{0.5, 0.5}}));
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  Tape t;
  const DenseMatrix p = row_softmax(t.constant({{1000, 0}})).value();
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.0, 1e-15);
}

TEST(RowSoftmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 gen(8);
  const DenseMatrix x = random_matrix(5, 5, gen);
  DenseMatrix shifted = x;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) shifted(i, j) += 3.0 * static_cast<double>(i) - 1.0;
  Tape t;
  const DenseMatrix p = row_softmax(t.constant(x)).value();
  const DenseMatrix q = row_softmax(t.constant(shifted)).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      s += p(i, j);
      EXPECT_GE(p(i, j), 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(max_abs_diff(p, q), 1e-14);
}

TEST(RowSoftmax, MaskedEntriesAreExactlyZero) {
  Tape t;
  DenseMatrix keep = ones(3, 3);
  for (std::size_t i = 0; i < 3; ++i) keep(i, i) = 0.0;
  const DenseMatrix p = row_softmax(t.constant({{5, 1, 2}, {0, 9, 0}, {1, 1, -4}}), keep).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p(i, i), 0.0);
  EXPECT_NEAR(p(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(1, 2), 0.5, 1e-15);
}

TEST(RowSoftmax, FullyMaskedRowIsDegenerate) {
  Tape t;
  DenseMatrix keep = ones(2, 2);
  keep(1, 0) = keep(1, 1) = 0.0;
  try {
    row_softmax(t.constant(DenseMatrix(2, 2)), keep);
    FAIL() << "expected DegenerateRowError";
  } catch (const DegenerateRowError& e) {
    EXPECT_EQ(e.row(), 1u);
  }
}

TEST(RowSoftmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(9);
  DenseMatrix keep = ones(4, 4);
  for (std::size_t i = 0; i < 4; ++i) keep(i, i) = 0.0;
  EXPECT_LT(fd_max_rel_error([](Tape&, const std::vector<Var>& v) { return weighted_sum(row_softmax(v[0]), 4); },
                             {random_matrix(4, 5, gen)}),
            1e-5);
  EXPECT_LT(
      fd_max_rel_error([&](Tape&, const std::vector<Var>& v) { return weighted_sum(row_softmax(v[0], keep), 5); },
                       {random_matrix(4, 4, gen)}),
      1e-5);
}

TEST(ConcatCols, SinglePartIsIdentity) {
  Tape t;
  const DenseMatrix m{{1, 2}, {3, 4}};
  EXPECT_EQ(concat_cols({t.constant(m)}).value(), m);
}

TEST(ConcatCols, TwoRowVectors) {
  Tape t;
  EXPECT_EQ(concat_cols({t.constant({{1, 2}}), t.constant({{3, 4}})}).value(), (DenseMatrix{{1, 2, 3, 4}}));
}

TEST(ConcatCols, RowMismatchIsError) {
  Tape t;
  EXPECT_THROW(concat_cols({t.constant(DenseMatrix(2, 1)), t.constant(DenseMatrix(3, 1))}), DimensionError);
}

TEST(ConcatCols, GradientSplitsByColumns) {
  std::mt19937_64 gen(10);
  EXPECT_LT(fd_max_rel_error(
                [](Tape&, const std::vector<Var>& v) { return weighted_sum(concat_cols({v[0], v[1], v[2]}), 6); },
                {random_matrix(3, 2, gen), random_matrix(3, 1, gen), random_matrix(3, 4, gen)}),
            1e-5);
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  std::mt19937_64 gen(11);
  Var m = t.variable(random_matrix(3, 4, gen));
  t.backward(sum(m));
  EXPECT_EQ(m.grad(), ones(3, 4));
}

TEST(Backward, SquaredFrobeniusGivesTwiceInput) {
  Tape t;
  std::mt19937_64 gen(12);
  const DenseMatrix mv = random_matrix(3, 4, gen);
  Var m = t.variable(mv);
  t.backward(sum(hadamard(m, m)));
  EXPECT_EQ(m.grad(), 2.0 * mv);
}

TEST(Backward, NonScalarOutputIsContractError) {
  Tape t;
  Var m = t.variable(DenseMatrix(2, 2));
  EXPECT_THROW(t.backward(m), ContractError);
}

TEST(Backward, GradientShapesMatchValues) {
  Tape t;
  std::mt19937_64 gen(13);
  Var a = t.variable(random_matrix(3, 4, gen));
  Var b = t.variable(random_matrix(4, 2, gen));
  Var c = t.variable(random_matrix(1, 2, gen));
  t.backward(sum(relu(add(matmul(a, b), c))));
  EXPECT_TRUE(a.grad().same_shape(a.value()));
  EXPECT_TRUE(b.grad().same_shape(b.value()));
  EXPECT_TRUE(c.grad().same_shape(c.value()));
}

TEST(Backward, TapeOrderIsTopological) {
  Tape t;
  std::mt19937_64 gen(14);
  Var a = t.variable(random_matrix(3, 3, gen));
  sum(row_softmax(matmul(a, relu(a))));
  for (std::size_t id = 0; id < t.size(); ++id)
    for (std::size_t p : t.node(id).parents) EXPECT_LT(p, id);
}

TEST(Backward, RepeatedPassesAreBitwiseIdentical) {
  Tape t;
  std::mt19937_64 gen(15);
  Var a = t.variable(random_matrix(4, 3, gen));
  Var b = t.variable(random_matrix(3, 4, gen));
  Var out = sum(row_softmax(matmul(a, b)));
  t.backward(out);
  const DenseMatrix ga = a.grad();
  const DenseMatrix gb = b.grad();
  t.backward(out);
  EXPECT_EQ(a.grad(), ga);
  EXPECT_EQ(b.grad(), gb);
}

TEST(Backward, TapeReusableAfterRewind) {
  Tape t;
  Var a = t.variable({{1.0, 2.0}});
  const std::size_t mark = t.mark();
  t.backward(sum(hadamard(a, a)));
  EXPECT_EQ(a.grad(), (DenseMatrix{{2.0, 4.0}}));
  t.rewind(mark);
  t.backward(sum(a));
  EXPECT_EQ(a.grad(), (DenseMatrix{{1.0, 1.0}}));
}

TEST(Backward, ConstantsReceiveNoGradientFlow) {
  Tape t;
  Var a = t.variable({{3.0}});
  Var c = t.constant({{5.0}});
  t.backward(sum(hadamard(a, c)));
  EXPECT_EQ(a.grad()(0, 0), 5.0);
  EXPECT_EQ(c.grad()(0, 0), 0.0);
}

TEST(Backward, SignFlipHookBreaksTheRule) {
  Tape t;
  t.inject_sign_flip(OpKind::kMatmul);
  Var a = t.variable({{1.0, 2.0}});
  Var b = t.constant({{3.0}, {4.0}});
  t.backward(sum(matmul(a, b)));
  EXPECT_EQ(a.grad(), (DenseMatrix{{-3.0, -4.0}}));
}

TEST(OtherOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 gen(16);
  auto check = [&](const testutil::ScalarFn& f, const std::vector<DenseMatrix>& in) {
    EXPECT_LT(fd_max_rel_error(f, in), 1e-5);
  };
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(linear(v[0], v[1]), 1); },
        {random_matrix(3, 4, gen), random_matrix(2, 4, gen)});
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(scale(v[0], -0.7), 2); }, {random_matrix(2, 3, gen)});
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(gather_rows(v[0], {2, 0, 2}), 3); },
        {random_matrix(3, 2, gen)});
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(slice_rows(v[0], 1, 2), 4); },
        {random_matrix(4, 2, gen)});
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(concat_rows(std::vector<Var>{v[0], v[1]}), 5); },
        {random_matrix(1, 3, gen), random_matrix(2, 3, gen)});
  check([](Tape&, const std::vector<Var>& v) { return weighted_sum(pair_scores(v[0], v[1], v[2]), 6); },
        {random_matrix(3, 1, gen), random_matrix(3, 1, gen), random_matrix(9, 1, gen)});
  check([](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], {1, 0, 3}); }, {random_matrix(3, 4, gen)});
  check([](Tape&, const std::vector<Var>& v) { return l21_norm(v[0]); }, {random_matrix(4, 3, gen, 0.1, 1.0)});
}

TEST(OtherOps, CrossEntropyMatchesNaiveLogSoftmax) {
  std::mt19937_64 gen(17);
  const DenseMatrix x = random_matrix(3, 4, gen);
  const std::vector<std::size_t> y{2, 0, 3};
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(x(i, j));
    expect += std::log(z) - x(i, y[i]);
  }
  Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(x), y).value()(0, 0), expect, 1e-12);
}

TEST(Frozen, ReplayReturnsLoggedValues) {
  Tape first;
  first.frozen({{1.0, 2.0}});
  Tape second;
  second.replay_frozen(first.frozen_values());
  EXPECT_EQ(second.frozen({{9.0, 9.0}}).value(), (DenseMatrix{{1.0, 2.0}}));
  EXPECT_THROW(second.frozen({{0.0, 0.0}}), ContractError);
}

TEST(Softmax, NanRowPropagatesInsteadOfMaskingError) {
  Tape t;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const DenseMatrix out = row_softmax(t.constant(DenseMatrix{{nan, nan}, {0.0, 0.0}})).value();
  EXPECT_TRUE(std::isnan(out(0, 0)));
  EXPECT_TRUE(std::isnan(out(0, 1)));
  EXPECT_DOUBLE_EQ(out(1, 0), 0.5);
}

TEST(Relu, NanPassesThrough) {
  Tape t;
  const DenseMatrix out = relu(t.constant(DenseMatrix{{std::numeric_limits<double>::quiet_NaN(), -0.0, -1.0}})).value();
  EXPECT_TRUE(std::isnan(out(0, 0)));
  EXPECT_EQ(out(0, 2), 0.0);
}
