#pragma once

// Biometric metrics over fake probabilities. Thresholds are placed on the
// liveness score s = 1 - p_fake: a sample is accepted as live when s >= t.

#include <cstddef>
#include <string>
#include <vector>

namespace hiptune {

struct RocPoint {
  double threshold = 0.0;
  double far = 0.0;  // fakes accepted as live
  double frr = 0.0;  // lives rejected
};

struct MetricsReport {
  double acer = 0.0;
  double auc = 0.0;
  double eer = 0.0;
  double acc = 0.0;
  double far = 0.0;  // at the operating threshold
  double frr = 0.0;
  double eer_threshold = 0.0;
  double threshold = 0.5;  // operating threshold used for acer/acc
  std::string threshold_policy = "fixed";
  std::vector<RocPoint> roc;  // thresholds ascending
  std::size_t n_live = 0;
  std::size_t n_fake = 0;
};

// labels: 0 live, 1 fake. Throws MetricError unless both classes occur.
MetricsReport compute_metrics(const std::vector<double>& fake_scores, const std::vector<int>& labels,
                              double threshold = 0.5, const std::string& policy = "fixed");

// Building blocks, exposed for checking.
double auc_rank(const std::vector<double>& live_scores, const std::vector<double>& fake_scores);
std::vector<RocPoint> roc_sweep(const std::vector<double>& live_scores, const std::vector<double>& fake_scores);
// Linear interpolation at the first sign change of FAR - FRR.
RocPoint equal_error_point(const std::vector<RocPoint>& roc);

}  // namespace hiptune
