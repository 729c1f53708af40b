#include <doctest.h>

#include "mgrasp/tensor.hpp"

#include <array>
#include <cmath>
#include <random>

using namespace mgrasp;

namespace {

Matrix mat(Index r, Index c, std::initializer_list<double> v) {
  Matrix m(r, c);
  auto it = v.begin();
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = *it++;
  return m;
}

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  const Tensor a(mat(2, 2, {1, 2, 3, 4}));
  const Tensor b(mat(2, 1, {5, 6}));
  const Tensor c = matmul(a, b);
  CHECK(c(0, 0) == 17.0);
  CHECK(c(1, 0) == 39.0);

  const Tensor eye(Matrix::Identity(2, 2));
  CHECK(matmul(eye, a).value() == a.value());

  try {
    matmul(b, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x1") != std::string::npos);
  }
}

TEST_CASE("row_softmax") {
  const Tensor s = row_softmax(Tensor(mat(2, 3, {1, 2, 3, 0, 0, 0})));
  CHECK(s(0, 0) == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s(0, 1) == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s(0, 2) == doctest::Approx(0.66524).epsilon(1e-4));
  CHECK(s(1, 0) == doctest::Approx(1.0 / 3.0));

  const Tensor half = row_softmax(Tensor(mat(1, 2, {0, 0})));
  CHECK(half(0, 0) == 0.5);

  SUBCASE("shift invariance and stochastic rows") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix x = random_matrix(4, 6, rng, -30.0, 30.0);
      const Matrix p = row_softmax(Tensor(x)).value();
      const Matrix q = row_softmax(Tensor((x.array() + 123.5).matrix())).value();
      CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(p.minCoeff() >= 0.0);
      CHECK(p.maxCoeff() <= 1.0);
      for (Index r = 0; r < p.rows(); ++r) CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm") {
  const Tensor gain(Matrix::Ones(1, 4));
  const Tensor bias(Matrix::Zero(1, 4));
  const Tensor y = layer_norm(Tensor(mat(1, 4, {1, 2, 3, 4})), gain, bias, 0.0);
  CHECK(y(0, 0) == doctest::Approx(-1.34164).epsilon(1e-5));
  CHECK(y(0, 1) == doctest::Approx(-0.44721).epsilon(1e-5));
  CHECK(y(0, 2) == doctest::Approx(0.44721).epsilon(1e-5));
  CHECK(y(0, 3) == doctest::Approx(1.34164).epsilon(1e-5));

  const Tensor flat = layer_norm(Tensor(mat(1, 4, {5, 5, 5, 5})), gain, bias);
  CHECK(flat.value().cwiseAbs().maxCoeff() == 0.0);

  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(6, 9, rng, -10, 10);
  const Matrix z = layer_norm(Tensor(x), Tensor(Matrix::Ones(1, 9)), Tensor(Matrix::Zero(1, 9))).value();
  for (Index r = 0; r < z.rows(); ++r) {
    const double var = (x.row(r).array() - x.row(r).mean()).square().mean();
    CHECK(std::abs(z.row(r).mean()) < 1e-12);
    CHECK(std::abs(z.row(r).squaredNorm() / 9.0 - 1.0) < 1e-6);
    CHECK(std::abs(z.row(r).squaredNorm() / 9.0 - var / (var + 1e-5)) < 1e-12);
  }

  CHECK_THROWS_AS(layer_norm(Tensor(Matrix::Ones(3, 1)), Tensor(Matrix::Ones(1, 1)), Tensor(Matrix::Zero(1, 1))),
                  ShapeError);
}

TEST_CASE("l2_normalize_rows") {
  const Tensor y = l2_normalize_rows(Tensor(mat(3, 2, {3, 4, 0, 0, 0.6, 0.8})));
  CHECK(y(0, 0) == doctest::Approx(0.6));
  CHECK(y(0, 1) == doctest::Approx(0.8));
  CHECK(y(1, 0) == 0.0);
  CHECK(y(1, 1) == 0.0);
  CHECK(y(2, 0) == doctest::Approx(0.6));
}

TEST_CASE("only row broadcast is supported") {
  const Tensor a(Matrix::Ones(3, 4));
  CHECK(add_row(a, Tensor(Matrix::Ones(1, 4)))(2, 3) == 2.0);
  CHECK_THROWS_AS(add(a, Tensor(Matrix::Ones(1, 4))), ShapeError);
  CHECK_THROWS_AS(add_row(a, Tensor(Matrix::Ones(2, 4))), ShapeError);
  CHECK_THROWS_AS(mul(a, Tensor(Matrix::Ones(4, 3))), ShapeError);
}

TEST_CASE("backward basics") {
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor x(mat(2, 2, {1, -2, 3, 0.5}), true);
  const Tensor unused(Matrix::Ones(2, 2), true);
  const Tensor loss = add(sum(x), sum(mul(x, x)));
  tape.backward(loss);
  const Matrix g = tape.grad(x);
  CHECK(g == (Matrix::Ones(2, 2) + 2.0 * x.value()));
  CHECK(tape.grad(unused) == Matrix::Zero(2, 2));
}

TEST_CASE("tape contract") {
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor x(mat(1, 3, {1, 2, 3}), true);
  CHECK_THROWS_AS(tape.backward(mul(x, x)), ContractError);

  const Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("tape records in topological order and visits every node once") {
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor x(mat(1, 2, {0.3, -0.7}), true);
  const Tensor y = exp(x);
  // y is used twice; its gradient must accumulate, not be overwritten.
  const Tensor loss = sum(add(mul(y, y), y));
  CHECK(tape.size() == 4);
  tape.backward(loss);
  const Matrix e = x.value().array().exp().matrix();
  const Matrix expected = (2.0 * e.array() * e.array() + e.array()).matrix();
  CHECK((tape.grad(x) - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("no tape, no recording") {
  const Tensor x(Matrix::Ones(2, 2), true);
  const Tensor y = mul(x, x);
  CHECK_FALSE(y.on_tape());
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tape::Suspend off;
    CHECK_FALSE(matmul(x, x).on_tape());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("mixing tapes is rejected") {
  const Tensor x(Matrix::Ones(2, 2), true);
  Tape first;
  Tensor y;
  {
    Tape::Scope scope(first);
    y = mul(x, x);
  }
  Tape second;
  Tape::Scope scope(second);
  CHECK_THROWS_AS(add(y, x), ContractError);
}

TEST_CASE("leaves are mutable, recorded values are not") {
  Tensor x(Matrix::Ones(1, 2), true);
  x.mutable_value()(0, 0) = 4.0;
  CHECK(x(0, 0) == 4.0);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(y.mutable_value(), ContractError);
  const Tensor c = x.clone();
  x.mutable_value()(0, 1) = 9.0;
  CHECK(c(0, 1) == 1.0);
}

TEST_CASE("slices, concat, pick, mean") {
  const Tensor a(mat(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  CHECK(slice_rows(a, 1, 2).value() == mat(2, 3, {4, 5, 6, 7, 8, 9}));
  CHECK(slice_cols(a, 2, 1).value() == mat(3, 1, {3, 6, 9}));
  const std::array<Tensor, 2> parts{slice_cols(a, 2, 1), slice_cols(a, 0, 1)};
  CHECK(concat_cols(parts).value() == mat(3, 2, {3, 1, 6, 4, 9, 7}));
  const std::array<std::pair<Index, Index>, 2> entries{{{2, 0}, {0, 2}}};
  CHECK(pick(a, entries).value() == mat(2, 1, {7, 3}));
  CHECK(mean_rows(a).value() == mat(1, 3, {4, 5, 6}));
  CHECK(transpose(a)(0, 2) == 7.0);
  CHECK_THROWS_AS(slice_rows(a, 2, 2), ShapeError);
}

TEST_CASE("grad_check oracle cases") {
  std::mt19937_64 rng(11);
  SUBCASE("quadratic form") {
    const Matrix q = random_matrix(4, 4, rng);
    const Matrix sym = q + q.transpose();
    std::array<Tensor, 1> p{Tensor(random_matrix(1, 4, rng), true)};
    const Tensor s(sym);
    const auto r = grad_check([&] { return sum(mul(matmul(p[0], s), p[0])); }, p);
    CHECK(r.max_rel_error < 1e-9);
  }
  SUBCASE("softmax then sum of squares") {
    std::array<Tensor, 1> p{Tensor(random_matrix(3, 5, rng, -2, 2), true)};
    const auto r = grad_check(
        [&] {
          const Tensor s = row_softmax(p[0]);
          return sum(mul(s, s));
        },
        p);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("matmul sum") {
    std::array<Tensor, 2> p{Tensor(random_matrix(3, 4, rng), true), Tensor(random_matrix(4, 2, rng), true)};
    CHECK(grad_check([&] { return sum(matmul(p[0], p[1])); }, p).max_rel_error < 1e-6);
  }
  SUBCASE("layer_norm") {
    std::array<Tensor, 3> p{Tensor(random_matrix(3, 5, rng, -2, 2), true), Tensor(random_matrix(1, 5, rng), true),
                            Tensor(random_matrix(1, 5, rng), true)};
    const Matrix w = random_matrix(3, 5, rng);
    CHECK(grad_check([&] { return sum(mul(layer_norm(p[0], p[1], p[2]), Tensor(w))); }, p).max_rel_error < 1e-5);
  }
  SUBCASE("tamper hook is seen") {
    std::array<Tensor, 1> p{Tensor(random_matrix(2, 2, rng), true)};
    const auto r = grad_check([&] { return sum(mul(p[0], p[0])); }, p, 1e-5,
                              [](std::vector<Matrix>& g) { g[0](1, 1) += 0.5; });
    CHECK(r.max_rel_error > 1e-2);
    CHECK(r.row == 1);
    CHECK(r.col == 1);
  }
}

TEST_CASE("finite outputs on finite inputs") {
  std::mt19937_64 rng(17);
  const Matrix x = random_matrix(4, 4, rng, -50, 50);
  const Tensor t(x);
  CHECK(row_softmax(t).value().allFinite());
  CHECK(layer_norm(t, Tensor(Matrix::Ones(1, 4)), Tensor(Matrix::Zero(1, 4))).value().allFinite());
  CHECK(l2_normalize_rows(t).value().allFinite());
  CHECK(tanh(t).value().allFinite());
}

TEST_CASE("determinism") {
  std::mt19937_64 rng(19);
  const Matrix x = random_matrix(5, 5, rng);
  auto run = [&] {
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor p(x, true);
    const Tensor loss = sum(mul(row_softmax(matmul(p, p)), p));
    tape.backward(loss);
    return std::pair{loss.item(), tape.grad(p)};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
