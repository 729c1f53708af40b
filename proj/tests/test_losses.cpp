#include <doctest.h>

#include "mgrasp/losses.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace mgrasp;

namespace {

GraspHeadOutput head_output(const Matrix& logits, const Matrix& rects) {
  return {Tensor(logits), Tensor(rects)};
}

}  // namespace

TEST_CASE("correspondence loss matches brute force") {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<Index> mdist(2, 16), ddist(3, 16);
  std::uniform_real_distribution<double> adist(0.01, 0.5);
  for (int trial = 0; trial < 300; ++trial) {
    const Index m = mdist(rng), d = ddist(rng);
    LossConfig cfg;
    cfg.alpha = adist(rng);
    const Matrix zv = oracle::random_matrix(m, d, rng, -2, 2), zs = oracle::random_matrix(m, d, rng, -2, 2);
    const double got = correspondence_loss(Tensor(zv), Tensor(zs), cfg).item();
    CHECK(std::abs(got - oracle::correspondence(zv, zs, cfg.alpha)) < 1e-12);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("aligned orthonormal features cost nothing") {
  for (Index m : {2, 4, 8}) {
    const Matrix eye = Matrix::Identity(m, m);
    CHECK(correspondence_loss(Tensor(eye), Tensor(eye), LossConfig{}).item() == 0.0);
  }
}

TEST_CASE("identical rows pay the margin twice per anchor") {
  const Matrix rows = Matrix::Constant(4, 6, 0.3);
  LossConfig cfg;
  cfg.alpha = 0.1;
  CHECK(correspondence_loss(Tensor(rows), Tensor(rows), cfg).item() == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("hard negative mining") {
  Matrix s(3, 3);
  s << 0.9, 0.5, 0.5,  //
      0.2, 0.8, 0.7,   //
      0.2, 0.1, 0.6;
  const HardNegatives neg = mine_hard_negatives(s);
  CHECK(neg.seg_negative == std::vector<Index>{1, 2, 0});
  CHECK(neg.vis_negative == std::vector<Index>{1, 0, 1});
  for (std::size_t a = 0; a < 3; ++a) {
    CHECK(neg.seg_negative[a] != static_cast<Index>(a));
    CHECK(neg.vis_negative[a] != static_cast<Index>(a));
  }
  CHECK_THROWS_AS(mine_hard_negatives(Matrix::Zero(1, 1)), ContractError);
  CHECK_THROWS_AS(mine_hard_negatives(Matrix::Zero(2, 3)), ContractError);
  CHECK_THROWS_AS(correspondence_loss(Tensor(Matrix::Ones(1, 4)), Tensor(Matrix::Ones(1, 4)), LossConfig{}),
                  ContractError);
  CHECK_THROWS_AS(correspondence_loss(Tensor(Matrix::Ones(3, 4)), Tensor(Matrix::Ones(2, 4)), LossConfig{}),
                  ShapeError);
}

TEST_CASE("similarity is the cosine") {
  RowVector a(3), b(3);
  a << 1, 0, 0;
  b << 1, 1, 0;
  CHECK(similarity(a, b) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(similarity(a, -a) == doctest::Approx(-1.0));
  CHECK(similarity(3.0 * b, b) == doctest::Approx(1.0));
  CHECK_THROWS_AS(similarity(a, RowVector::Ones(4)), ShapeError);
}

TEST_CASE("grasp loss matches the oracle") {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> u(0.05, 0.95), ang(-180.0, 180.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Index m = 1 + trial % 12;
    const Matrix logits = oracle::random_matrix(m, 2, rng, -4, 4);
    const Matrix rects = oracle::random_matrix(m, 5, rng, -2, 2);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(m));
    std::vector<GraspRect> gts(static_cast<std::size_t>(m));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = (rng() % 3 == 0) ? 1 : 0;
      gts[i] = {u(rng), u(rng), u(rng), u(rng), ang(rng)};
    }
    LossConfig cfg;
    cfg.beta = 0.5 + (trial % 4);
    const double got = grasp_loss(head_output(logits, rects), labels, gts, cfg).item();
    CHECK(std::abs(got - oracle::grasp(logits, rects, labels, gts, cfg.beta)) < 1e-11);
  }
}

TEST_CASE("grasp loss hand values") {
  const std::vector<GraspRect> gts{{0.5, 0.5, 0.2, 0.1, 45.0}};
  const std::vector<std::uint8_t> negative{0};
  CHECK(grasp_loss(head_output(Matrix::Zero(1, 2), Matrix::Zero(1, 5)), negative, gts, LossConfig{}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Positive at even odds, exact regression except x off by 0.5: ln 2 + 1.4 · 0.125.
  Matrix rects(1, 5);
  rects << 1.0, 0.5, 0.2, 0.1, 0.5;
  const std::vector<std::uint8_t> positive{1};
  CHECK(grasp_loss(head_output(Matrix::Zero(1, 2), rects), positive, gts, LossConfig{}).item() ==
        doctest::Approx(std::log(2.0) + 0.175).epsilon(1e-12));

  // Residual 2 in one coordinate is past the smooth-L1 knee: 2 − 0.5.
  rects(0, 1) = 2.5;
  rects(0, 0) = 0.5;
  CHECK(grasp_loss(head_output(Matrix::Zero(1, 2), rects), positive, gts, LossConfig{}).item() ==
        doctest::Approx(std::log(2.0) + 1.4 * 1.5).epsilon(1e-12));

  LossConfig no_reg;
  no_reg.beta = 0.0;
  CHECK(grasp_loss(head_output(Matrix::Zero(1, 2), rects), positive, gts, no_reg).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("grasp loss contracts") {
  const std::vector<GraspRect> gts(2);
  const std::vector<std::uint8_t> labels{1};
  CHECK_THROWS_AS(grasp_loss(head_output(Matrix::Zero(2, 2), Matrix::Zero(2, 5)), labels, gts, LossConfig{}),
                  ContractError);
  const std::vector<std::uint8_t> two{1, 0};
  CHECK_THROWS_AS(grasp_loss(head_output(Matrix::Zero(2, 3), Matrix::Zero(2, 5)), two, gts, LossConfig{}),
                  ShapeError);
  CHECK_THROWS_AS(grasp_loss(head_output(Matrix::Zero(0, 2), Matrix::Zero(0, 5)), {}, {}, LossConfig{}),
                  ContractError);
}

TEST_CASE("regression targets and total loss") {
  const RowVector t = rect_to_target({0.1, 0.2, 0.3, 0.4, 135.0});
  CHECK(t(0) == 0.1);
  CHECK(t(3) == 0.4);
  CHECK(t(4) == doctest::Approx(-0.5));
  CHECK(rect_to_target({0, 0, 1, 1, -90.0})(4) == -1.0);

  LossConfig cfg;
  CHECK(cfg.alpha == 0.1);
  CHECK(cfg.beta == 1.4);
  CHECK(cfg.lambda_c == 0.8);
  CHECK(total_loss(Tensor::scalar(0.875), Tensor::scalar(0.8), cfg).item() == doctest::Approx(1.515).epsilon(1e-14));
  cfg.lambda_c = 0.0;
  CHECK(total_loss(Tensor::scalar(0.875), Tensor::scalar(0.8), cfg).item() == 0.875);

  LossConfig bad;
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = LossConfig{};
  bad.lambda_c = -1.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("mined negatives are constants under differentiation") {
  // Away from ties, tape gradients match finite differences of the brute-force loss.
  std::mt19937_64 rng(107);
  const Matrix zv = oracle::random_matrix(5, 6, rng), zs = oracle::random_matrix(5, 6, rng);
  Tensor v(zv, true), s(zs, true);
  Tape tape;
  Tensor loss;
  {
    Tape::Scope scope(tape);
    loss = correspondence_loss(v, s, LossConfig{});
  }
  tape.backward(loss);
  const Matrix g = tape.grad(v);
  const double h = 1e-6;
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 6; ++j) {
      Matrix up = zv, dn = zv;
      up(i, j) += h;
      dn(i, j) -= h;
      const double fd = (oracle::correspondence(up, zs, 0.1) - oracle::correspondence(dn, zs, 0.1)) / (2 * h);
      CHECK(std::abs(fd - g(i, j)) < 1e-6);
    }
}
