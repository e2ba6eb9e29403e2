#include "hiptune/evaluation.hpp"

#include "hiptune/errors.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace hiptune {
namespace {

using ojson = nlohmann::ordered_json;

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double p_fake_of(const Matrix& probs) { return probs(0, 1); }

}  // namespace

std::vector<HiptunePrediction> predict_hiptune(const HiptuneModel& model, const Dataset& dataset,
                                               const std::vector<std::size_t>& indices) {
  std::vector<HiptunePrediction> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    ag::Tape tape;
    ScoreResult r = model.score(tape, dataset.images.at(i));
    out.push_back({p_fake_of(r.probs.value()), r.decision.path(), r.decision.distributions,
                   r.decision.stopped_at_live});
  }
  return out;
}

double routing_accuracy(const AttackTaxonomy& taxonomy, const std::vector<HiptunePrediction>& predictions,
                        const std::vector<SampleLabel>& labels) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw ContractError("routing_accuracy: predictions and labels must be non-empty and aligned");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].path == select_supervised_path(taxonomy, labels[i])) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

std::vector<double> clipv_scores(const DualEncoder& encoder, const Dataset& dataset,
                                 const std::vector<std::size_t>& indices) {
  ag::Tape wt;
  const Matrix weights = template_weights(wt, encoder).value();
  std::vector<double> out;
  for (std::size_t i : indices) {
    out.push_back(p_fake_of(class_probabilities(plain_feature(encoder, dataset.images.at(i)), weights,
                                                encoder.config().temperature)));
  }
  return out;
}

std::vector<double> coop_scores(const CoopBaseline& baseline, const DualEncoder& encoder, const Dataset& dataset,
                                const std::vector<std::size_t>& indices) {
  ag::Tape wt;
  const Matrix weights = baseline.text_weights(wt, encoder).value();
  std::vector<double> out;
  for (std::size_t i : indices) {
    out.push_back(p_fake_of(class_probabilities(plain_feature(encoder, dataset.images.at(i)), weights,
                                                encoder.config().temperature)));
  }
  return out;
}

std::vector<int> binary_labels(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<int> out;
  for (std::size_t i : indices) out.push_back(dataset.manifest.records.at(i).is_live ? 0 : 1);
  return out;
}

double operating_threshold(const RunConfig& config, const std::vector<double>& val_scores,
                           const std::vector<int>& val_labels) {
  if (config.threshold_policy == "fixed") return config.threshold;
  return compute_metrics(val_scores, val_labels).eer_threshold;
}

ProtocolReport run_protocol(const Dataset& dataset, const RunConfig& config, std::uint64_t seed,
                            RunArtifacts* artifacts) {
  config.validate();
  const AttackTaxonomy tax = config.taxonomy();
  validate_manifest(dataset.manifest, tax);
  if (tax.fingerprint() != dataset.manifest.taxonomy().fingerprint()) {
    throw ConfigError("dataset taxonomy differs from the run configuration");
  }
  RunArtifacts local;
  RunArtifacts& art = artifacts ? *artifacts : local;
  art.split = make_protocol_split(dataset.manifest, config.protocol, seed, config.protocol_options);
  const ProtocolSplit& split = art.split;

  ProtocolReport report;
  report.protocol = config.protocol;
  report.seed = seed;
  report.n_train = split.train.size();
  report.n_val = split.val.size();
  report.n_test = split.test.size();

  const TrainingSet train = make_training_set(dataset, split.train);
  art.model.emplace(tax, config.model, derive_seed(seed, 1));
  HiptuneModel& model = *art.model;
  art.trace.append(pretrain_encoder(model.encoder, train, config.pretrain, derive_seed(seed, 2)));

  const auto test_labels = binary_labels(dataset, split.test);
  const auto val_labels = binary_labels(dataset, split.val);
  auto evaluate = [&](Comparator c, const std::vector<double>& val_scores, const std::vector<double>& test_scores) {
    ComparatorResult r;
    r.comparator = c;
    const double t = operating_threshold(config, val_scores, val_labels);
    r.metrics = compute_metrics(test_scores, test_labels, t, config.threshold_policy);
    return r;
  };
  const bool need_val = config.threshold_policy == "dev-eer";

  for (Comparator c : config.comparators) {
    switch (c) {
      case Comparator::ClipV: {
        report.results.push_back(evaluate(c, need_val ? clipv_scores(model.encoder, dataset, split.val) : std::vector<double>{},
                                          clipv_scores(model.encoder, dataset, split.test)));
        break;
      }
      case Comparator::CoopUnified:
      case Comparator::CoopSpecific: {
        BaselineConfig bc = config.coop;
        bc.class_specific = c == Comparator::CoopSpecific;
        auto& slot = bc.class_specific ? art.coop_specific : art.coop_unified;
        slot.emplace(bc, config.model.encoder.text_dim, 2, derive_seed(seed, bc.class_specific ? 4 : 3));
        art.trace.append(train_coop(*slot, model.encoder, train, config.coop_train, derive_seed(seed, 5)));
        report.results.push_back(
            evaluate(c, need_val ? coop_scores(*slot, model.encoder, dataset, split.val) : std::vector<double>{},
                     coop_scores(*slot, model.encoder, dataset, split.test)));
        break;
      }
      case Comparator::HiPTune: {
        TrainState state(derive_seed(seed, 6));
        train_stage1(model, train, config.loss, state);
        train_stage2(model, train, config.loss, state);
        art.trace.append(state.trace);
        std::vector<double> val_scores;
        if (need_val) {
          for (const auto& p : predict_hiptune(model, dataset, split.val)) val_scores.push_back(p.p_fake);
        }
        const auto preds = predict_hiptune(model, dataset, split.test);
        std::vector<double> test_scores;
        std::vector<SampleLabel> labels;
        for (std::size_t k = 0; k < preds.size(); ++k) {
          test_scores.push_back(preds[k].p_fake);
          labels.push_back(dataset.manifest.records[split.test[k]].label());
        }
        ComparatorResult r = evaluate(c, val_scores, test_scores);
        r.routing_accuracy = routing_accuracy(tax, preds, labels);
        report.results.push_back(std::move(r));
        break;
      }
    }
  }
  return report;
}

ProtocolReport run_protocol(ProtocolId protocol, const RunConfig& config) {
  RunConfig c = config;
  c.protocol = protocol;
  const Dataset ds = generate_dataset(c.taxonomy(), c.data);
  return run_protocol(ds, c, c.seed);
}

std::vector<SummaryRow> summarize(const std::vector<ProtocolReport>& reports) {
  std::map<Comparator, std::vector<const ComparatorResult*>> by;
  std::vector<Comparator> order;
  for (const auto& rep : reports) {
    for (const auto& r : rep.results) {
      if (!by.count(r.comparator)) order.push_back(r.comparator);
      by[r.comparator].push_back(&r);
    }
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  std::vector<SummaryRow> out;
  for (Comparator c : order) {
    const auto& rs = by[c];
    SummaryRow row;
    row.comparator = c;
    row.runs = rs.size();
    std::vector<double> acer, auc, eer, acc, routing;
    for (const auto* r : rs) {
      acer.push_back(r->metrics.acer);
      auc.push_back(r->metrics.auc);
      eer.push_back(r->metrics.eer);
      acc.push_back(r->metrics.acc);
      if (r->routing_accuracy) routing.push_back(*r->routing_accuracy);
    }
    stats(acer, row.acer_mean, row.acer_std);
    stats(auc, row.auc_mean, row.auc_std);
    stats(eer, row.eer_mean, row.eer_std);
    stats(acc, row.acc_mean, row.acc_std);
    if (!routing.empty()) {
      double m, s;
      stats(routing, m, s);
      row.routing_mean = m;
    }
    out.push_back(row);
  }
  return out;
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "text") return ReportFormat::Text;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json") return ReportFormat::Json;
  throw ConfigError("unknown report format '" + s + "' (expected text, csv or json)");
}

std::string format_reports(const std::vector<ProtocolReport>& reports, ReportFormat format) {
  std::ostringstream os;
  const auto summary = reports.size() > 1 ? summarize(reports) : std::vector<SummaryRow>{};
  switch (format) {
    case ReportFormat::Text: {
      char line[256];
      std::snprintf(line, sizeof line, "%-8s %-6s %-14s %8s %8s %8s %8s %9s  %s\n", "protocol", "seed",
                    "comparator", "ACER%", "AUC%", "EER%", "ACC%", "routing%", "threshold");
      os << line;
      for (const auto& rep : reports) {
        for (const auto& r : rep.results) {
          const std::string routing = r.routing_accuracy ? pct(*r.routing_accuracy) : "-";
          std::snprintf(line, sizeof line, "%-8s %-6llu %-14s %8s %8s %8s %8s %9s  %s %s\n", to_string(rep.protocol),
                        static_cast<unsigned long long>(rep.seed), to_string(r.comparator), pct(r.metrics.acer).c_str(),
                        pct(r.metrics.auc).c_str(), pct(r.metrics.eer).c_str(), pct(r.metrics.acc).c_str(),
                        routing.c_str(), r.metrics.threshold_policy.c_str(), fixed(r.metrics.threshold, 4).c_str());
          os << line;
        }
      }
      if (!summary.empty()) {
        os << "\nmean +- std over seeds\n";
        for (const auto& s : summary) {
          std::snprintf(line, sizeof line, "%-14s n=%zu  ACER %s +- %s  AUC %s +- %s  EER %s +- %s  ACC %s +- %s\n",
                        to_string(s.comparator), s.runs, pct(s.acer_mean).c_str(), pct(s.acer_std).c_str(),
                        pct(s.auc_mean).c_str(), pct(s.auc_std).c_str(), pct(s.eer_mean).c_str(),
                        pct(s.eer_std).c_str(), pct(s.acc_mean).c_str(), pct(s.acc_std).c_str());
          os << line;
        }
      }
      break;
    }
    case ReportFormat::Csv: {
      os << "protocol,seed,comparator,acer,auc,eer,acc,routing,threshold_policy,threshold\n";
      for (const auto& rep : reports) {
        for (const auto& r : rep.results) {
          os << to_string(rep.protocol) << ',' << rep.seed << ',' << to_string(r.comparator) << ','
             << pct(r.metrics.acer) << ',' << pct(r.metrics.auc) << ',' << pct(r.metrics.eer) << ','
             << pct(r.metrics.acc) << ',' << (r.routing_accuracy ? pct(*r.routing_accuracy) : "") << ','
             << r.metrics.threshold_policy << ',' << fixed(r.metrics.threshold, 4) << '\n';
        }
      }
      for (const auto& s : summary) {
        os << "mean," << s.runs << ',' << to_string(s.comparator) << ',' << pct(s.acer_mean) << ','
           << pct(s.auc_mean) << ',' << pct(s.eer_mean) << ',' << pct(s.acc_mean) << ','
           << (s.routing_mean ? pct(*s.routing_mean) : "") << ",,\n";
        os << "std," << s.runs << ',' << to_string(s.comparator) << ',' << pct(s.acer_std) << ','
           << pct(s.auc_std) << ',' << pct(s.eer_std) << ',' << pct(s.acc_std) << ",,,\n";
      }
      break;
    }
    case ReportFormat::Json: {
      ojson j;
      j["rows"] = ojson::array();
      for (const auto& rep : reports) {
        for (const auto& r : rep.results) {
          ojson row;
          row["protocol"] = to_string(rep.protocol);
          row["seed"] = rep.seed;
          row["comparator"] = to_string(r.comparator);
          row["acer"] = pct(r.metrics.acer);
          row["auc"] = pct(r.metrics.auc);
          row["eer"] = pct(r.metrics.eer);
          row["acc"] = pct(r.metrics.acc);
          row["routing"] = r.routing_accuracy ? ojson(pct(*r.routing_accuracy)) : ojson(nullptr);
          row["threshold_policy"] = r.metrics.threshold_policy;
          row["threshold"] = fixed(r.metrics.threshold, 4);
          j["rows"].push_back(row);
        }
      }
      if (!summary.empty()) {
        j["summary"] = ojson::array();
        for (const auto& s : summary) {
          j["summary"].push_back({{"comparator", to_string(s.comparator)},
                                  {"runs", s.runs},
                                  {"acer_mean", pct(s.acer_mean)},
                                  {"acer_std", pct(s.acer_std)},
                                  {"auc_mean", pct(s.auc_mean)},
                                  {"auc_std", pct(s.auc_std)},
                                  {"eer_mean", pct(s.eer_mean)},
                                  {"eer_std", pct(s.eer_std)},
                                  {"acc_mean", pct(s.acc_mean)},
                                  {"acc_std", pct(s.acc_std)}});
        }
      }
      os << j.dump(2) << '\n';
      break;
    }
  }
  return os.str();
}

std::string report_to_json(const std::vector<ProtocolReport>& reports) {
  ojson j = ojson::array();
  for (const auto& rep : reports) {
    ojson r;
    r["protocol"] = to_string(rep.protocol);
    r["seed"] = rep.seed;
    r["n_train"] = rep.n_train;
    r["n_val"] = rep.n_val;
    r["n_test"] = rep.n_test;
    r["results"] = ojson::array();
    for (const auto& c : rep.results) {
      const auto& m = c.metrics;
      ojson x;
      x["comparator"] = to_string(c.comparator);
      x["acer"] = m.acer;
      x["auc"] = m.auc;
      x["eer"] = m.eer;
      x["acc"] = m.acc;
      x["far"] = m.far;
      x["frr"] = m.frr;
      x["eer_threshold"] = m.eer_threshold;
      x["threshold"] = m.threshold;
      x["threshold_policy"] = m.threshold_policy;
      x["n_live"] = m.n_live;
      x["n_fake"] = m.n_fake;
      x["routing_accuracy"] = c.routing_accuracy ? ojson(*c.routing_accuracy) : ojson(nullptr);
      r["results"].push_back(x);
    }
    j.push_back(r);
  }
  return j.dump(2) + "\n";
}

std::vector<ProtocolReport> reports_from_json(const std::string& text) {
  std::vector<ProtocolReport> out;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw ConfigError("report file must hold a JSON array");
    for (const auto& r : j) {
      ProtocolReport rep;
      rep.protocol = parse_protocol(r.at("protocol").get<std::string>());
      rep.seed = r.at("seed").get<std::uint64_t>();
      rep.n_train = r.at("n_train").get<std::size_t>();
      rep.n_val = r.at("n_val").get<std::size_t>();
      rep.n_test = r.at("n_test").get<std::size_t>();
      for (const auto& x : r.at("results")) {
        ComparatorResult c;
        c.comparator = parse_comparator(x.at("comparator").get<std::string>());
        auto& m = c.metrics;
        m.acer = x.at("acer").get<double>();
        m.auc = x.at("auc").get<double>();
        m.eer = x.at("eer").get<double>();
        m.acc = x.at("acc").get<double>();
        m.far = x.at("far").get<double>();
        m.frr = x.at("frr").get<double>();
        m.eer_threshold = x.at("eer_threshold").get<double>();
        m.threshold = x.at("threshold").get<double>();
        m.threshold_policy = x.at("threshold_policy").get<std::string>();
        m.n_live = x.at("n_live").get<std::size_t>();
        m.n_fake = x.at("n_fake").get<std::size_t>();
        if (!x.at("routing_accuracy").is_null()) c.routing_accuracy = x.at("routing_accuracy").get<double>();
        rep.results.push_back(c);
      }
      out.push_back(rep);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report file: ") + e.what());
  }
  return out;
}

}  // namespace hiptune
