#pragma once

// Protocol runs: train the requested comparators on a split, score the
// test set and emit one MetricsReport per comparator.

#include "hiptune/checkpoint.hpp"
#include "hiptune/config.hpp"
#include "hiptune/dataset.hpp"
#include "hiptune/metrics.hpp"
#include "hiptune/protocols.hpp"
#include "hiptune/training.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace hiptune {

struct HiptunePrediction {
  double p_fake = 0.0;
  PromptPath path;  // routed nodes
  std::vector<Matrix> distributions;
  bool stopped_at_live = false;
};

std::vector<HiptunePrediction> predict_hiptune(const HiptuneModel& model, const Dataset& dataset,
                                               const std::vector<std::size_t>& indices);

// Fraction of samples routed to their labelled path (live samples must stop
// at the live node, fakes must match all three levels).
double routing_accuracy(const AttackTaxonomy& taxonomy, const std::vector<HiptunePrediction>& predictions,
                        const std::vector<SampleLabel>& labels);

// Zero-shot template scores of the (pretrained, frozen) encoder.
std::vector<double> clipv_scores(const DualEncoder& encoder, const Dataset& dataset,
                                 const std::vector<std::size_t>& indices);
std::vector<double> coop_scores(const CoopBaseline& baseline, const DualEncoder& encoder, const Dataset& dataset,
                                const std::vector<std::size_t>& indices);

std::vector<int> binary_labels(const Dataset& dataset, const std::vector<std::size_t>& indices);

struct ComparatorResult {
  Comparator comparator = Comparator::HiPTune;
  MetricsReport metrics;
  std::optional<double> routing_accuracy;  // HiPTune only
};

struct ProtocolReport {
  ProtocolId protocol = ProtocolId::P1;
  std::uint64_t seed = 0;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  std::vector<ComparatorResult> results;
};

// Everything trained during a run, for callers that want to keep it.
struct RunArtifacts {
  std::optional<HiptuneModel> model;
  std::optional<CoopBaseline> coop_unified, coop_specific;
  LossTrace trace;
  ProtocolSplit split;
};

// Threshold for acer/acc: the fixed value, or the EER threshold of the
// validation scores under "dev-eer".
double operating_threshold(const RunConfig& config, const std::vector<double>& val_scores,
                           const std::vector<int>& val_labels);

ProtocolReport run_protocol(const Dataset& dataset, const RunConfig& config, std::uint64_t seed,
                            RunArtifacts* artifacts = nullptr);
// Generates the configured dataset first.
ProtocolReport run_protocol(ProtocolId protocol, const RunConfig& config);

struct SummaryRow {
  Comparator comparator = Comparator::HiPTune;
  std::size_t runs = 0;
  double acer_mean = 0, acer_std = 0, auc_mean = 0, auc_std = 0;
  double eer_mean = 0, eer_std = 0, acc_mean = 0, acc_std = 0;
  std::optional<double> routing_mean;
};

// Mean and sample standard deviation per comparator across seeds.
std::vector<SummaryRow> summarize(const std::vector<ProtocolReport>& reports);

enum class ReportFormat { Text, Csv, Json };
ReportFormat parse_report_format(const std::string& s);

// One row per (seed, comparator) with percentages to two decimals, plus a
// summary block when several seeds are present.
std::string format_reports(const std::vector<ProtocolReport>& reports, ReportFormat format);

// Lossless round trip for the CLI's report files.
std::string report_to_json(const std::vector<ProtocolReport>& reports);
std::vector<ProtocolReport> reports_from_json(const std::string& text);

}  // namespace hiptune
