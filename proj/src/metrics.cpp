#include "hiptune/metrics.hpp"

#include "hiptune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace hiptune {
namespace {

std::vector<double> sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// Entries of the sorted vector that are >= t.
std::size_t count_at_least(const std::vector<double>& s, double t) {
  return static_cast<std::size_t>(s.end() - std::lower_bound(s.begin(), s.end(), t));
}

}  // namespace

double auc_rank(const std::vector<double>& live_scores, const std::vector<double>& fake_scores) {
  if (live_scores.empty() || fake_scores.empty()) throw MetricError("AUC needs both classes");
  struct Item {
    double s;
    bool live;
  };
  std::vector<Item> all;
  for (double s : live_scores) all.push_back({s, true});
  for (double s : fake_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.s < b.s; });
  // Mann-Whitney U with mid-ranks; doubled to keep everything integral.
  long double rank_sum2 = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].s == all[i].s) ++j;
    const long double mid2 = static_cast<long double>(i + 1 + j);  // 2 * average 1-based rank
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].live) rank_sum2 += mid2;
    }
    i = j;
  }
  const long double nl = static_cast<long double>(live_scores.size());
  const long double nf = static_cast<long double>(fake_scores.size());
  const long double u2 = rank_sum2 - nl * (nl + 1);
  return static_cast<double>(u2 / (2 * nl * nf));
}

std::vector<RocPoint> roc_sweep(const std::vector<double>& live_scores, const std::vector<double>& fake_scores) {
  if (live_scores.empty() || fake_scores.empty()) throw MetricError("ROC needs both classes");
  const auto live = sorted(live_scores);
  const auto fake = sorted(fake_scores);
  std::vector<double> thresholds = live;
  thresholds.insert(thresholds.end(), fake.begin(), fake.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::nextafter(thresholds.back(), std::numeric_limits<double>::infinity()));
  std::vector<RocPoint> roc;
  const double nl = static_cast<double>(live.size()), nf = static_cast<double>(fake.size());
  for (double t : thresholds) {
    roc.push_back({t, static_cast<double>(count_at_least(fake, t)) / nf,
                   static_cast<double>(live.size() - count_at_least(live, t)) / nl});
  }
  return roc;
}

RocPoint equal_error_point(const std::vector<RocPoint>& roc) {
  if (roc.empty()) throw MetricError("empty ROC");
  for (std::size_t k = 0; k < roc.size(); ++k) {
    const double d = roc[k].far - roc[k].frr;
    if (d == 0.0) return roc[k];
    if (d < 0.0) {
      if (k == 0) return roc[0];
      const RocPoint& a = roc[k - 1];
      const RocPoint& b = roc[k];
      const double da = a.far - a.frr;
      const double alpha = da / (da - d);
      const double far = a.far + alpha * (b.far - a.far);
      return {a.threshold + alpha * (b.threshold - a.threshold), far, far};
    }
  }
  return roc.back();
}

MetricsReport compute_metrics(const std::vector<double>& fake_scores, const std::vector<int>& labels,
                              double threshold, const std::string& policy) {
  if (fake_scores.size() != labels.size()) throw MetricError("scores and labels differ in length");
  std::vector<double> live, fake;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw LabelError("metric labels must be 0 (live) or 1 (fake)");
    if (!std::isfinite(fake_scores[i])) throw MetricError("non-finite score");
    (labels[i] == 0 ? live : fake).push_back(1.0 - fake_scores[i]);
  }
  if (live.empty() || fake.empty()) throw MetricError("metrics need both live and fake samples");

  MetricsReport r;
  r.n_live = live.size();
  r.n_fake = fake.size();
  r.roc = roc_sweep(live, fake);
  r.auc = auc_rank(live, fake);
  const RocPoint e = equal_error_point(r.roc);
  r.eer = e.far;
  r.eer_threshold = e.threshold;
  r.threshold = threshold;
  r.threshold_policy = policy;
  const auto sl = sorted(live), sf = sorted(fake);
  const std::size_t live_ok = count_at_least(sl, threshold);
  const std::size_t fake_in = count_at_least(sf, threshold);
  r.far = static_cast<double>(fake_in) / static_cast<double>(r.n_fake);
  r.frr = static_cast<double>(r.n_live - live_ok) / static_cast<double>(r.n_live);
  r.acer = 0.5 * (r.far + r.frr);
  r.acc = static_cast<double>(live_ok + (r.n_fake - fake_in)) / static_cast<double>(r.n_live + r.n_fake);
  return r;
}

}  // namespace hiptune
