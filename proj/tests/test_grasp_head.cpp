#include <doctest.h>

#include "mgrasp/grasp_head.hpp"
#include "oracles.hpp"

#include <random>

using namespace mgrasp;

TEST_CASE("head matches the straight-line oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = 4 + 4 * (trial % 3), hid = 6 + trial % 5, m = 2 + trial % 7, k = 1 + trial % 4;
    const GraspHeadParams p = oracle::random_head(d, hid, rng);
    const Matrix zt = oracle::random_matrix(k, d, rng, -2, 2), zv = oracle::random_matrix(m, d, rng, -2, 2);
    const GraspHeadOutput out = grasp_head_forward(Tensor(zt), Tensor(zv), p);
    const oracle::Head ref = oracle::head(zt, zv, p);
    CHECK((out.logits.value() - ref.logits).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.rect_params.value() - ref.rect_params).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("zero score weights give even odds") {
  std::mt19937_64 rng(4);
  GraspHeadParams p = oracle::random_head(8, 10, rng);
  p.score_w = Tensor::zeros(10, 2);
  p.score_b = Tensor::zeros(1, 2);
  const GraspPrediction pred =
      fuse_and_score(Tensor(oracle::random_matrix(3, 8, rng)), Tensor(oracle::random_matrix(5, 8, rng)), p);
  REQUIRE(pred.scores.size() == 5);
  for (double s : pred.scores) CHECK(s == 0.5);
  CHECK(pred.best_index == 0);
}

TEST_CASE("decoded scores and probabilities") {
  GraspHeadOutput out;
  Matrix logits(4, 2);
  logits << 0.0, 0.0, 3.0, -1.0, -50.0, 50.0, 800.0, -800.0;
  Matrix rects(4, 5);
  rects << 0.5, 0.5, 0.2, 0.1, 0.0,  //
      -0.3, 1.4, 2.0, -1.0, 0.5,     //
      0.1, 0.2, 0.3, 0.4, -1.0,      //
      0.9, 0.1, 0.05, 0.5, 0.999;
  out.logits = Tensor(logits);
  out.rect_params = Tensor(rects);
  const GraspPrediction pred = decode_prediction(out);
  CHECK(pred.scores[0] == doctest::Approx(0.5));
  CHECK(pred.scores[1] == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))).epsilon(1e-14));
  CHECK(pred.scores[2] < 1e-40);
  CHECK(pred.scores[3] == 1.0);
  CHECK(pred.best_index == 3);
  for (double s : pred.scores) {
    const double ungraspable = 1.0 - s;
    CHECK(s + ungraspable == doctest::Approx(1.0));
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  CHECK(pred.rects[1].x == 0.0);
  CHECK(pred.rects[1].y == 1.0);
  CHECK(pred.rects[1].w == 1.0);
  CHECK(pred.rects[1].h == 1e-6);
  CHECK(pred.rects[1].theta == doctest::Approx(45.0));
  CHECK(pred.rects[2].theta == doctest::Approx(-90.0));
  for (const GraspRect& r : pred.rects) {
    CHECK(r.theta >= -90.0);
    CHECK(r.theta < 90.0);
  }
}

TEST_CASE("select_best takes the argmax, lowest index on ties") {
  GraspPrediction pred;
  pred.scores = {0.2, 0.7, 0.7, 0.1};
  pred.rects.resize(4);
  pred.rects[1].x = 0.25;
  const auto [rect, idx] = select_best(pred);
  CHECK(idx == 1);
  CHECK(rect.x == 0.25);

  // Any strictly increasing transform keeps the choice.
  GraspPrediction warped = pred;
  for (double& s : warped.scores) s = std::exp(5.0 * s) - 3.0;
  CHECK(select_best(warped).second == 1);

  GraspPrediction empty;
  CHECK_THROWS_AS(select_best(empty), ContractError);
  GraspPrediction ragged;
  ragged.scores = {0.1, 0.2};
  ragged.rects.resize(1);
  CHECK_THROWS_AS(select_best(ragged), ContractError);
}

TEST_CASE("forcing one logit gap selects that proposal") {
  std::mt19937_64 rng(6);
  GraspHeadParams p = oracle::random_head(4, 6, rng);
  const Matrix zt = oracle::random_matrix(2, 4, rng);
  Matrix zv = oracle::random_matrix(5, 4, rng);
  // With the text half of the first layer zeroed and a single active hidden
  // unit reading one coordinate, the score is monotone in that coordinate.
  Matrix w1 = Matrix::Zero(8, 6);
  w1(4, 0) = 1.0;
  p.fuse1_w = Tensor(w1);
  p.fuse1_b = Tensor::zeros(1, 6);
  p.fuse2_w = Tensor(Matrix::Identity(6, 6));
  p.fuse2_b = Tensor::zeros(1, 6);
  Matrix sw = Matrix::Zero(6, 2);
  sw(0, 0) = 4.0;
  p.score_w = Tensor(sw);
  p.score_b = Tensor::zeros(1, 2);
  zv.col(0).setConstant(0.1);
  zv(3, 0) = 2.0;
  const GraspPrediction pred = fuse_and_score(Tensor(zt), Tensor(zv), p);
  CHECK(pred.best_index == 3);
  CHECK(select_best(pred).second == 3);
}

TEST_CASE("head shape contracts") {
  std::mt19937_64 rng(8);
  const GraspHeadParams p = oracle::random_head(8, 6, rng);
  CHECK_NOTHROW(p.validate());
  CHECK(p.input_dim() == 8);
  CHECK(p.hidden_dim() == 6);
  CHECK_THROWS_AS(grasp_head_forward(Tensor(oracle::random_matrix(2, 6, rng)),
                                     Tensor(oracle::random_matrix(3, 8, rng)), p),
                  ShapeError);
  GraspHeadParams bad = p;
  bad.score_w = Tensor::zeros(6, 3);
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  CHECK(p.named_tensors().size() == 8);
}
