#pragma once

#include <Eigen/Core>

#include "mgrasp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace mgrasp {

/// Oriented grasp rectangle: centre (x, y), width w along the rotated x axis,
/// height h, orientation theta in degrees from the image horizontal.
template <typename Scalar>
struct BasicGraspRect {
  Scalar x{};
  Scalar y{};
  Scalar w{};
  Scalar h{};
  Scalar theta{};

  friend bool operator==(const BasicGraspRect&, const BasicGraspRect&) = default;
};

using GraspRect = BasicGraspRect<double>;

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;

template <typename Scalar>
using Polygon = std::vector<Point2<Scalar>>;

/// Success thresholds: IoU strictly above, angle offset strictly below.
inline constexpr double kSuccessIou = 0.25;
inline constexpr double kSuccessAngleDeg = 30.0;

/// Maps an angle in degrees into [-90, 90). A rectangle is symmetric under
/// half turns, so this does not change its point set.
template <typename Scalar>
Scalar canonical_angle(Scalar deg) {
  Scalar t = std::fmod(deg + Scalar(90), Scalar(180));
  if (t < Scalar(0)) t += Scalar(180);
  t -= Scalar(90);
  return t >= Scalar(90) ? t - Scalar(180) : t;
}

template <typename Scalar>
BasicGraspRect<Scalar> canonicalized(BasicGraspRect<Scalar> r) {
  r.theta = canonical_angle(r.theta);
  return r;
}

template <typename Scalar>
Scalar degrees_to_radians(Scalar deg) {
  return deg * Scalar(3.14159265358979323846) / Scalar(180);
}

/// Corners of `r`, counter-clockwise, starting at (+w/2, +h/2) in the
/// rectangle frame.
template <typename Scalar>
Polygon<Scalar> rect_to_polygon(const BasicGraspRect<Scalar>& r) {
  if (!(r.w > Scalar(0)) || !(r.h > Scalar(0))) {
    throw ContractError("rect_to_polygon: width and height must be positive");
  }
  const Scalar a = degrees_to_radians(r.theta);
  Eigen::Matrix<Scalar, 2, 2> rot;
  rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  const Point2<Scalar> c(r.x, r.y);
  const Scalar hw = r.w / Scalar(2);
  const Scalar hh = r.h / Scalar(2);
  return {c + rot * Point2<Scalar>(hw, hh), c + rot * Point2<Scalar>(-hw, hh), c + rot * Point2<Scalar>(-hw, -hh),
          c + rot * Point2<Scalar>(hw, -hh)};
}

/// Shoelace area; positive for counter-clockwise polygons.
template <typename Scalar>
Scalar signed_area(const Polygon<Scalar>& p) {
  Scalar acc(0);
  const std::size_t n = p.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) acc += p[j].x() * p[i].y() - p[i].x() * p[j].y();
  return acc / Scalar(2);
}

namespace detail {

template <typename Scalar>
Scalar cross(const Point2<Scalar>& o, const Point2<Scalar>& a, const Point2<Scalar>& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

}  // namespace detail

/// Sutherland-Hodgman: clips `subject` by every edge of the convex
/// counter-clockwise polygon `clip`.
template <typename Scalar>
Polygon<Scalar> clip_convex(const Polygon<Scalar>& subject, const Polygon<Scalar>& clip) {
  Polygon<Scalar> out = subject;
  const std::size_t m = clip.size();
  for (std::size_t e2 = 0, e1 = m - 1; e2 < m && !out.empty(); e1 = e2++) {
    const Polygon<Scalar> in = std::move(out);
    out.clear();
    const std::size_t n = in.size();
    for (std::size_t v2 = 0, v1 = n - 1; v2 < n; v1 = v2++) {
      const Scalar s1 = detail::cross(clip[e1], clip[e2], in[v1]);
      const Scalar s2 = detail::cross(clip[e1], clip[e2], in[v2]);
      const bool in1 = s1 >= Scalar(0);
      const bool in2 = s2 >= Scalar(0);
      if (in1 != in2) {
        const Scalar t = s1 / (s1 - s2);
        out.push_back(in[v1] + t * (in[v2] - in[v1]));
      }
      if (in2) out.push_back(in[v2]);
    }
  }
  return out;
}

/// Area of the intersection of two convex counter-clockwise polygons.
/// Degenerate (zero-area) inputs give 0.
template <typename Scalar>
Scalar convex_intersection_area(const Polygon<Scalar>& p1, const Polygon<Scalar>& p2) {
  if (p1.size() < 3 || p2.size() < 3) return Scalar(0);
  if (!(signed_area(p1) > Scalar(0)) || !(signed_area(p2) > Scalar(0))) return Scalar(0);
  const Polygon<Scalar> inter = clip_convex(p1, p2);
  if (inter.size() < 3) return Scalar(0);
  return std::max(Scalar(0), signed_area(inter));
}

template <typename Scalar>
Scalar rotated_iou(const BasicGraspRect<Scalar>& a, const BasicGraspRect<Scalar>& b) {
  const Scalar inter = convex_intersection_area(rect_to_polygon(a), rect_to_polygon(b));
  const Scalar uni = a.w * a.h + b.w * b.h - inter;
  if (!(uni > Scalar(0))) return Scalar(0);
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

/// Orientation offset in [0, 90] under the rectangle's 180° symmetry.
template <typename Scalar>
Scalar angle_diff(Scalar t1, Scalar t2) {
  const Scalar d = std::fmod(std::abs(t1 - t2), Scalar(180));
  return std::min(d, Scalar(180) - d);
}

/// True iff some ground truth has IoU > 0.25 and angle offset < 30°.
template <typename Scalar>
bool is_success(const BasicGraspRect<Scalar>& pred,
                std::span<const BasicGraspRect<std::type_identity_t<Scalar>>> gts) {
  if (gts.empty()) throw ContractError("is_success: no ground-truth rectangles");
  for (const auto& gt : gts) {
    if (angle_diff(pred.theta, gt.theta) < Scalar(kSuccessAngleDeg) && rotated_iou(pred, gt) > Scalar(kSuccessIou)) {
      return true;
    }
  }
  return false;
}

// ---- split-level evaluation ----------------------------------------------

struct SceneOutcome {
  bool success = false;
  bool is_unseen = false;
};

struct EvalReport {
  double seen_success = 0.0;
  double unseen_success = 0.0;
  double harmonic = 0.0;
  std::size_t seen_count = 0;
  std::size_t unseen_count = 0;
  std::size_t seen_hits = 0;
  std::size_t unseen_hits = 0;

  bool has_seen() const { return seen_count > 0; }
  bool has_unseen() const { return unseen_count > 0; }
};

/// 2su / (s + u), defined as 0 when s + u = 0.
double harmonic_mean(double s, double u);

/// Aggregates per-scene outcomes. Both splits must be non-empty.
EvalReport evaluate_split(std::span<const SceneOutcome> outcomes);

/// Like evaluate_split but tolerates an absent split; its rate and the
/// harmonic mean are then left at 0 with count 0.
EvalReport summarize_outcomes(std::span<const SceneOutcome> outcomes);

}  // namespace mgrasp
