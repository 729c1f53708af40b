#include <doctest.h>

#include "mgrasp/geometry.hpp"
#include "oracles.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <random>

using namespace mgrasp;

TEST_CASE("analytic IoU values") {
  const GraspRect unit{0, 0, 1, 1, 0};
  CHECK(rotated_iou(unit, unit) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rotated_iou(unit, GraspRect{0.5, 0, 1, 1, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(rotated_iou(unit, GraspRect{0, 0, 1, 1, 45}) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(rotated_iou(unit, GraspRect{0, 0, 1, 1, 45}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(rotated_iou(unit, GraspRect{3, 0, 1, 1, 0}) == 0.0);
  CHECK(rotated_iou(unit, GraspRect{0, 0, 1, 1, 90}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rotated_iou(unit, GraspRect{0, 0, 1, 1, 180}) == doctest::Approx(1.0).epsilon(1e-12));
  // A 2×0.5 bar crossed with its 90° rotation: overlap 0.25, union 1.75.
  CHECK(rotated_iou(GraspRect{0, 0, 2, 0.5, 0}, GraspRect{0, 0, 2, 0.5, 90}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  // Containment: IoU is the area ratio.
  CHECK(rotated_iou(GraspRect{0, 0, 2, 2, 0}, GraspRect{0.1, 0.2, 0.5, 0.5, 30}) ==
        doctest::Approx(0.0625).epsilon(1e-12));
}

TEST_CASE("IoU is symmetric, bounded and agrees with Monte Carlo") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0.0, 1.0), size(0.05, 0.6), ang(-180.0, 180.0);
  for (int i = 0; i < 300; ++i) {
    const GraspRect a{pos(rng), pos(rng), size(rng), size(rng), ang(rng)};
    const GraspRect b{a.x + 0.3 * (pos(rng) - 0.5), a.y + 0.3 * (pos(rng) - 0.5), size(rng), size(rng), ang(rng)};
    const double ab = rotated_iou(a, b);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(std::abs(ab - rotated_iou(b, a)) < 1e-12);
    CHECK(std::abs(ab - rotated_iou(canonicalized(a), b)) < 1e-12);
    if (i < 40) CHECK(std::abs(ab - oracle::monte_carlo_iou(a, b, 250000, static_cast<std::uint64_t>(i))) < 5e-3);
  }
}

TEST_CASE("IoU is invariant under a common rigid motion") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> pos(-1.0, 1.0), size(0.1, 1.0), ang(-180.0, 180.0);
  for (int i = 0; i < 2000; ++i) {
    const GraspRect a{pos(rng), pos(rng), size(rng), size(rng), ang(rng)};
    const GraspRect b{a.x + 0.5 * pos(rng), a.y + 0.5 * pos(rng), size(rng), size(rng), ang(rng)};
    const double phi = ang(rng);
    const double c = std::cos(phi * std::numbers::pi / 180.0), s = std::sin(phi * std::numbers::pi / 180.0);
    const double tx = 3.0 * pos(rng), ty = 3.0 * pos(rng);
    auto move = [&](const GraspRect& r) {
      return GraspRect{c * r.x - s * r.y + tx, s * r.x + c * r.y + ty, r.w, r.h, r.theta + phi};
    };
    CHECK(std::abs(rotated_iou(move(a), move(b)) - rotated_iou(a, b)) < 1e-9);
  }
}

namespace {

bool same_vertices(const Polygon<double>& a, const Polygon<double>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& p : a) {
    bool found = false;
    for (const auto& q : b) found = found || (p - q).cwiseAbs().maxCoeff() < 1e-12;
    if (!found) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("a half turn leaves the polygon's vertex set unchanged") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> pos(-1.0, 1.0), size(0.1, 1.0), ang(-180.0, 180.0);
  for (int i = 0; i < 500; ++i) {
    const GraspRect r{pos(rng), pos(rng), size(rng), size(rng), ang(rng)};
    const auto base = rect_to_polygon(r);
    for (double turn : {180.0, -180.0}) {
      GraspRect t = r;
      t.theta += turn;
      CHECK(same_vertices(rect_to_polygon(t), base));
    }
    CHECK(same_vertices(rect_to_polygon(canonicalized(r)), base));
  }
}

TEST_CASE("float instantiation") {
  const BasicGraspRect<float> a{0.f, 0.f, 1.f, 1.f, 0.f}, b{0.5f, 0.f, 1.f, 1.f, 0.f};
  CHECK(rotated_iou(a, b) == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));
}

TEST_CASE("degenerate rectangles") {
  CHECK_THROWS_AS(rect_to_polygon(GraspRect{0, 0, 0, 1, 0}), ContractError);
  CHECK_THROWS_AS(rotated_iou(GraspRect{0, 0, 1, -1, 0}, GraspRect{0, 0, 1, 1, 0}), ContractError);
}

TEST_CASE("angles") {
  CHECK(canonical_angle(90.0) == -90.0);
  CHECK(canonical_angle(-90.0) == -90.0);
  CHECK(canonical_angle(180.0) == 0.0);
  CHECK(canonical_angle(135.0) == -45.0);
  CHECK(canonical_angle(-135.0) == 45.0);
  CHECK(canonical_angle(270.0) == -90.0);
  CHECK(canonical_angle(89.5) == 89.5);
  CHECK(angle_diff(10.0, 170.0) == doctest::Approx(20.0));
  CHECK(angle_diff(0.0, 90.0) == 90.0);
  CHECK(angle_diff(-80.0, 80.0) == doctest::Approx(20.0));
  CHECK(angle_diff(30.0, 390.0) == doctest::Approx(0.0));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ang(-720.0, 720.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = ang(rng), b = ang(rng);
    const double d = angle_diff(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 90.0);
    CHECK(std::abs(d - angle_diff(b, a)) < 1e-9);
    CHECK(std::abs(d - angle_diff(a + 180.0, b)) < 1e-9);
    const double c = canonical_angle(a);
    CHECK(c >= -90.0);
    CHECK(c < 90.0);
  }
}

TEST_CASE("success truth table") {
  const GraspRect gt{0.5, 0.5, 0.2, 0.1, 0.0};
  const std::array<GraspRect, 1> gts{gt};
  CHECK(is_success(gt, std::span<const GraspRect>(gts)));
  CHECK(is_success(GraspRect{0.5, 0.5, 0.2, 0.1, 29.9}, std::span<const GraspRect>(gts)) ==
        (rotated_iou(GraspRect{0.5, 0.5, 0.2, 0.1, 29.9}, gt) > 0.25));
  // Angle on the boundary fails even at full overlap of centres.
  CHECK_FALSE(is_success(GraspRect{0.5, 0.5, 0.2, 0.1, 30.0}, std::span<const GraspRect>(gts)));
  // Good angle, no overlap.
  CHECK_FALSE(is_success(GraspRect{0.9, 0.9, 0.2, 0.1, 0.0}, std::span<const GraspRect>(gts)));
  // Good overlap, bad angle.
  CHECK_FALSE(is_success(GraspRect{0.5, 0.5, 0.2, 0.2, 60.0}, std::span<const GraspRect>(gts)));
  // Half-turn symmetry.
  CHECK(is_success(GraspRect{0.5, 0.5, 0.2, 0.1, 179.0}, std::span<const GraspRect>(gts)));
  // Any matching ground truth suffices.
  const std::array<GraspRect, 2> two{GraspRect{0.1, 0.1, 0.1, 0.1, 0.0}, gt};
  CHECK(is_success(gt, std::span<const GraspRect>(two)));
  CHECK_THROWS_AS(is_success(gt, std::span<const GraspRect>()), ContractError);

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> shift(-0.15, 0.15), ang(-90.0, 90.0);
  for (int i = 0; i < 2000; ++i) {
    const GraspRect p{0.5 + shift(rng), 0.5 + shift(rng), 0.2, 0.1, ang(rng)};
    const bool expected = rotated_iou(p, gt) > 0.25 && angle_diff(p.theta, gt.theta) < 30.0;
    CHECK(is_success(p, std::span<const GraspRect>(gts)) == expected);
  }
}

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(0.5, 0.46) == doctest::Approx(0.47917).epsilon(1e-5));
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);
  CHECK(harmonic_mean(1.0, 0.0) == 0.0);
  CHECK(harmonic_mean(0.7, 0.7) == doctest::Approx(0.7).epsilon(1e-15));
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double s = u(rng), v = u(rng);
    const double h = harmonic_mean(s, v);
    CHECK(h == doctest::Approx(harmonic_mean(v, s)).epsilon(1e-15));
    CHECK(h <= 0.5 * (s + v) + 1e-15);
    CHECK(h >= std::min(s, v) - 1e-15);
    CHECK(h <= std::max(s, v) + 1e-15);
  }
}

TEST_CASE("split evaluation") {
  const std::vector<SceneOutcome> outcomes{{true, false}, {false, false}, {true, true}, {true, true}, {false, true}};
  const EvalReport r = evaluate_split(outcomes);
  CHECK(r.seen_count == 2);
  CHECK(r.unseen_count == 3);
  CHECK(r.seen_hits == 1);
  CHECK(r.unseen_hits == 2);
  CHECK(r.seen_success == 0.5);
  CHECK(r.unseen_success == doctest::Approx(2.0 / 3.0));
  CHECK(r.harmonic == doctest::Approx(harmonic_mean(0.5, 2.0 / 3.0)).epsilon(1e-15));

  const std::vector<SceneOutcome> seen_only{{true, false}, {true, false}};
  CHECK_THROWS_AS(evaluate_split(seen_only), ContractError);
  const EvalReport partial = summarize_outcomes(seen_only);
  CHECK(partial.seen_success == 1.0);
  CHECK_FALSE(partial.has_unseen());
  CHECK(partial.harmonic == 0.0);
  CHECK_THROWS_AS(evaluate_split({}), ContractError);
}
