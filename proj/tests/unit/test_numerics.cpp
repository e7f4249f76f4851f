#include <gtest/gtest.h>

#include <cmath>

#include "hashcl/errors.hpp"
#include "hashcl/grad.hpp"
#include "hashcl/matrix.hpp"
#include "hashcl/rng.hpp"

using namespace hashcl;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix a = Matrix::from_rows({{1.5, -2.0}, {0.25, 4.0}});
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
}

TEST(Matmul, RowTimesIdentity) {
  const Matrix r = Matrix::from_rows({{1, 2}});
  EXPECT_EQ(matmul(r, Matrix::from_rows({{1, 0}, {0, 1}})), r);
}

TEST(Matmul, HandArithmetic) {
  const Matrix out = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{5}, {6}}));
  EXPECT_EQ(out, Matrix::from_rows({{17}, {39}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, AssociativeOnRandomMatrices) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = rng.normal_matrix(3, 4, 1.0);
    const Matrix b = rng.normal_matrix(4, 5, 1.0);
    const Matrix c = rng.normal_matrix(5, 2, 1.0);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      const double l = left.values()[i], r = right.values()[i];
      EXPECT_LE(std::abs(l - r), 1e-10 * std::max(1.0, std::abs(l)));
    }
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(3);
  const Matrix a = rng.normal_matrix(3, 4, 1.0);
  const Matrix b = rng.normal_matrix(5, 4, 1.0);
  EXPECT_EQ(matmul_nt(a, b), matmul(a, transpose(b)));
  const Matrix c = rng.normal_matrix(3, 2, 1.0);
  EXPECT_EQ(matmul_tn(a, c), matmul(transpose(a), c));
}

TEST(Softmax, EqualInputsGiveUniform) {
  const auto p = softmax(std::vector<double>{2.5, 2.5, 2.5});
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedFormLogTwo) {
  const auto p = softmax(std::vector<double>{std::log(2.0), 0.0});
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  const auto p = softmax(std::vector<double>{1000.0, 0.0});
  EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
  EXPECT_NEAR(p[0], 1.0, 1e-15);
  EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyInputIsAnArgumentError) {
  EXPECT_THROW(softmax(std::vector<double>{}), ArgumentError);
}

TEST(Softmax, ProbabilityVectorAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.index(9));
    for (double& x : v) x = rng.normal(0.0, 5.0);
    const auto p = softmax(v);
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    std::vector<double> shifted = v;
    for (double& x : shifted) x += 3.75;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(Softmax, MonotoneInInputs) {
  const auto p = softmax(std::vector<double>{0.1, 0.7, 0.3});
  EXPECT_LT(p[0], p[2]);
  EXPECT_LT(p[2], p[1]);
}

TEST(FiniteDifference, Square) {
  const Matrix theta = Matrix::from_rows({{3.0}});
  const auto g = finite_difference_gradient([](const Matrix& m) { return m(0, 0) * m(0, 0); },
                                            theta);
  EXPECT_NEAR(g(0, 0), 6.0, 1e-6);
}

TEST(FiniteDifference, ConstantLossHasZeroGradient) {
  const auto g = finite_difference_gradient([](const Matrix&) { return 4.2; }, Matrix(2, 3, 1.0));
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, SumHasAllOnesGradient) {
  const auto g = finite_difference_gradient(
      [](const Matrix& m) {
        double s = 0.0;
        for (double v : m.values()) s += v;
        return s;
      },
      Matrix(2, 2, 0.5));
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, NonFiniteLossIsANumericError) {
  EXPECT_THROW(finite_difference_gradient(
                   [](const Matrix& m) { return m(0, 0) > 1.0 ? std::nan("") : 0.0; },
                   Matrix(1, 1, 1.0)),
               NumericError);
}

TEST(GradTape, AccumulationIsAdditive) {
  GradTape tape;
  tape.accumulate("w", Matrix::from_rows({{1, 2}}));
  tape.accumulate("w", Matrix::from_rows({{0.5, -1}}));
  EXPECT_EQ(tape.at("w"), Matrix::from_rows({{1.5, 1}}));
  EXPECT_THROW(tape.accumulate("w", Matrix(2, 2)), DimensionError);
  EXPECT_EQ(tape.get_or_zero("absent", 2, 1), Matrix(2, 1));
}

TEST(CompareGradients, IgnoresEntriesBelowTheFloor) {
  const std::vector<double> a{1.0, 5e-9, 2.0};
  const std::vector<double> f{1.0, 1e-9, 2.0 * (1 + 1e-6)};
  const auto cmp = compare_gradients(a, f);
  EXPECT_EQ(cmp.checked, 2u);
  EXPECT_LT(cmp.max_relative_error, 2e-6);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, SplitDoesNotAdvanceParent) {
  Rng a(5), b(5);
  (void)a.split("child").normal();
  EXPECT_EQ(a.uniform(), b.uniform());
  EXPECT_NE(Rng(5).split("x").uniform(), Rng(5).split("y").uniform());
  EXPECT_EQ(Rng(5).split(3).uniform(), Rng(5).split(3).uniform());
}
