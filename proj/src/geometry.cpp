#include "mgrasp/geometry.hpp"

namespace mgrasp {

double harmonic_mean(double s, double u) {
  const double denom = s + u;
  return denom > 0.0 ? 2.0 * s * u / denom : 0.0;
}

EvalReport summarize_outcomes(std::span<const SceneOutcome> outcomes) {
  EvalReport report;
  for (const SceneOutcome& o : outcomes) {
    if (o.is_unseen) {
      ++report.unseen_count;
      report.unseen_hits += o.success ? 1 : 0;
    } else {
      ++report.seen_count;
      report.seen_hits += o.success ? 1 : 0;
    }
  }
  if (report.has_seen()) report.seen_success = static_cast<double>(report.seen_hits) / report.seen_count;
  if (report.has_unseen()) report.unseen_success = static_cast<double>(report.unseen_hits) / report.unseen_count;
  if (report.has_seen() && report.has_unseen()) {
    report.harmonic = harmonic_mean(report.seen_success, report.unseen_success);
  }
  return report;
}

EvalReport evaluate_split(std::span<const SceneOutcome> outcomes) {
  EvalReport report = summarize_outcomes(outcomes);
  if (!report.has_seen()) throw ContractError("evaluate_split: split 'seen' is empty");
  if (!report.has_unseen()) throw ContractError("evaluate_split: split 'unseen' is empty");
  return report;
}

}  // namespace mgrasp
