// hiptune command line: dataset generation, protocol splits, training,
// evaluation and report formatting.
//
// Exit codes: 0 success, 2 configuration or validation error, 1 any other
// failure.

#include "hiptune/checkpoint.hpp"
#include "hiptune/config.hpp"
#include "hiptune/dataset.hpp"
#include "hiptune/errors.hpp"
#include "hiptune/evaluation.hpp"
#include "hiptune/protocols.hpp"
#include "hiptune/training.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace fs = std::filesystem;
using namespace hiptune;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

RunConfig config_or_default(const std::string& path) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  c.validate();
  return c;
}

void check_dataset(const Dataset& ds, const RunConfig& config) {
  if (ds.manifest.taxonomy().fingerprint() != config.taxonomy().fingerprint()) {
    throw ConfigError("manifest taxonomy differs from the configuration's leaf counts");
  }
  if (!ds.images.empty() && (ds.images.front().height != config.model.encoder.image_size ||
                             ds.images.front().channels != config.model.encoder.channels)) {
    throw ConfigError("dataset image shape differs from the encoder configuration");
  }
}

std::vector<Comparator> parse_comparators(const std::vector<std::string>& names, const RunConfig& config) {
  if (names.empty()) return config.comparators;
  std::vector<Comparator> out;
  for (const auto& n : names) out.push_back(parse_comparator(n));
  return out;
}

const std::string kUnified = "coop-unified/";
const std::string kSpecific = "coop-specific/";

// --- generate -------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::optional<int> identities, frames, size;
  std::optional<std::uint64_t> seed;
  bool ppm = false;
};

int cmd_generate(const GenerateArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.identities) c.data.n_identities = *a.identities;
  if (a.frames) c.data.frames_per_method = *a.frames;
  if (a.size) {
    c.data.image_size = *a.size;
    c.model.encoder.image_size = *a.size;
  }
  if (a.seed) c.data.seed = *a.seed;
  c.data.validate();
  const Dataset ds = generate_dataset(c.taxonomy(), c.data);
  save_dataset(a.out, ds, a.ppm);
  std::cout << "wrote " << ds.images.size() << " samples (" << c.taxonomy().methods().size()
            << " methods, " << c.data.n_identities << " identities) to " << (fs::path(a.out) / "manifest.tsv").string()
            << "\n";
  return 0;
}

// --- split ----------------------------------------------------------------

struct SplitArgs {
  std::string manifest, protocol = "p1", out, config;
  std::uint64_t seed = 7;
};

int cmd_split(const SplitArgs& a) {
  const Manifest m = load_manifest(a.manifest);
  ProtocolOptions opts;
  if (!a.config.empty()) opts = config_or_default(a.config).protocol_options;
  const ProtocolSplit split = make_protocol_split(m, parse_protocol(a.protocol), a.seed, opts);
  check_protocol_split(m, split);
  const fs::path out = a.out.empty() ? fs::path(a.manifest) : fs::path(a.out);
  save_manifest(split.apply(m), out);
  std::cout << to_string(split.protocol) << " seed " << a.seed << ": train " << split.train.size() << ", val "
            << split.val.size() << ", test " << split.test.size() << " -> " << out.string() << "\n";
  return 0;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config, manifest, checkpoint, init, trace, stage = "all";
};

int cmd_train(const TrainArgs& a) {
  const RunConfig c = config_or_default(a.config);
  const Dataset ds = load_dataset(a.manifest);
  check_dataset(ds, c);
  const ProtocolSplit split = split_from_tags(ds.manifest);
  if (split.train.empty()) throw ConfigError("manifest has no train records; run 'split' first");
  const TrainingSet train = make_training_set(ds, split.train);

  HiptuneModel model(c.taxonomy(), c.model, derive_seed(c.seed, 1));
  TrainState state(derive_seed(c.seed, 6));
  Checkpoint out;
  LossTrace trace;

  if (a.stage == "1" || a.stage == "all") {
    trace.append(pretrain_encoder(model.encoder, train, c.pretrain, derive_seed(c.seed, 2)));
    // The flat-prompt baselines share the frozen encoder, so they are fitted
    // here and stored alongside the model.
    for (bool specific : {false, true}) {
      BaselineConfig bc = c.coop;
      bc.class_specific = specific;
      CoopBaseline coop(bc, c.model.encoder.text_dim, 2, derive_seed(c.seed, specific ? 4 : 3));
      trace.append(train_coop(coop, model.encoder, train, c.coop_train, derive_seed(c.seed, 5)));
      out.add(std::as_const(coop).parameters(), specific ? kSpecific : kUnified);
    }
    train_stage1(model, train, c.loss, state);
  } else if (a.stage == "2") {
    if (a.init.empty()) throw ConfigError("--stage 2 needs --init with a stage-1 checkpoint");
    const Checkpoint init = load_checkpoint(a.init);
    if (init.meta.count("stage") == 0 || init.meta.at("stage") != "1") {
      throw ConfigError("--init checkpoint is not a stage-1 checkpoint");
    }
    restore_model(init, model);
    for (const auto& b : init.blocks) {
      if (b.name.rfind("coop-", 0) == 0) out.blocks.push_back(b);
    }
    state.stage = 1;
    if (auto it = init.meta.find("step"); it != init.meta.end()) state.step = std::stol(it->second);
  } else {
    throw ConfigError("--stage must be 1, 2 or all");
  }
  if (a.stage == "2" || a.stage == "all") train_stage2(model, train, c.loss, state);
  trace.append(state.trace);

  Checkpoint ck = model_checkpoint(model, state.stage);
  ck.meta["step"] = std::to_string(state.step);
  ck.blocks.insert(ck.blocks.end(), out.blocks.begin(), out.blocks.end());
  save_checkpoint(ck, a.checkpoint);
  if (!a.trace.empty()) trace.save(a.trace);
  std::cout << "stage " << state.stage << " checkpoint -> " << a.checkpoint << " (" << state.step << " steps)\n";
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string config, manifest, checkpoint, split = "test", out, format = "text";
  std::vector<std::string> comparators;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig c = config_or_default(a.config);
  const ReportFormat format = parse_report_format(a.format);
  const Dataset ds = load_dataset(a.manifest);
  check_dataset(ds, c);
  const ProtocolSplit split = split_from_tags(ds.manifest);
  const Split which = parse_split(a.split);
  const std::vector<std::size_t>& idx =
      which == Split::Train ? split.train : which == Split::Val ? split.val : split.test;
  if (idx.empty()) throw ConfigError("manifest has no " + a.split + " records");

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  HiptuneModel model(c.taxonomy(), c.model, derive_seed(c.seed, 1));
  restore_model(ck, model);

  const auto labels = binary_labels(ds, idx);
  const auto val_labels = binary_labels(ds, split.val);
  const bool need_val = c.threshold_policy == "dev-eer";
  if (need_val && split.val.empty()) throw ConfigError("dev-eer threshold needs val records");

  ProtocolReport report;
  report.protocol = split.protocol;
  report.seed = split.seed;
  report.n_train = split.train.size();
  report.n_val = split.val.size();
  report.n_test = idx.size();
  for (Comparator comp : parse_comparators(a.comparators, c)) {
    std::vector<double> val_scores, scores;
    ComparatorResult r;
    r.comparator = comp;
    if (comp == Comparator::HiPTune) {
      if (ck.meta.count("stage") == 0 || ck.meta.at("stage") != "2") {
        throw ConfigError("hiptune evaluation needs a stage-2 checkpoint");
      }
      const auto preds = predict_hiptune(model, ds, idx);
      std::vector<SampleLabel> sl;
      for (std::size_t k = 0; k < preds.size(); ++k) {
        scores.push_back(preds[k].p_fake);
        sl.push_back(ds.manifest.records[idx[k]].label());
      }
      r.routing_accuracy = routing_accuracy(model.taxonomy, preds, sl);
      if (need_val) {
        for (const auto& p : predict_hiptune(model, ds, split.val)) val_scores.push_back(p.p_fake);
      }
    } else if (comp == Comparator::ClipV) {
      scores = clipv_scores(model.encoder, ds, idx);
      if (need_val) val_scores = clipv_scores(model.encoder, ds, split.val);
    } else {
      BaselineConfig bc = c.coop;
      bc.class_specific = comp == Comparator::CoopSpecific;
      CoopBaseline coop(bc, c.model.encoder.text_dim, 2, 0);
      ck.restore(coop.parameters(), bc.class_specific ? kSpecific : kUnified);
      scores = coop_scores(coop, model.encoder, ds, idx);
      if (need_val) val_scores = coop_scores(coop, model.encoder, ds, split.val);
    }
    r.metrics = compute_metrics(scores, labels, operating_threshold(c, val_scores, val_labels), c.threshold_policy);
    report.results.push_back(std::move(r));
  }
  if (!a.out.empty()) write_file(a.out, report_to_json({report}));
  std::cout << format_reports({report}, format);
  return 0;
}

// --- report ---------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string format = "text", out;
};

int cmd_report(const ReportArgs& a) {
  const ReportFormat format = parse_report_format(a.format);
  std::vector<ProtocolReport> all;
  for (const auto& in : a.inputs) {
    for (auto& r : reports_from_json(read_file(in))) all.push_back(std::move(r));
  }
  const std::string text = format_reports(all, format);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_file(a.out, text);
  }
  return 0;
}

// --- run ------------------------------------------------------------------

struct RunArgs {
  std::string config, protocol, out, format = "text", trace;
  std::vector<std::uint64_t> seeds;
};

int cmd_run(const RunArgs& a) {
  RunConfig c = config_or_default(a.config);
  if (!a.protocol.empty()) c.protocol = parse_protocol(a.protocol);
  const ReportFormat format = parse_report_format(a.format);
  std::vector<std::uint64_t> seeds = a.seeds;
  if (seeds.empty()) seeds = c.seeds.empty() ? std::vector<std::uint64_t>{c.seed} : c.seeds;
  const Dataset ds = generate_dataset(c.taxonomy(), c.data);
  std::vector<ProtocolReport> reports;
  LossTrace trace;
  for (std::uint64_t s : seeds) {
    RunArtifacts art;
    reports.push_back(run_protocol(ds, c, s, &art));
    trace.append(art.trace);
  }
  if (!a.out.empty()) write_file(a.out, report_to_json(reports));
  if (!a.trace.empty()) trace.save(a.trace);
  std::cout << format_reports(reports, format);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical prompt tuning for unified attack detection"};
  app.require_subcommand(1);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "render a synthetic dataset");
  gen->add_option("--config", ga.config, "run configuration JSON (data section)");
  gen->add_option("--identities", ga.identities, "number of identities");
  gen->add_option("--frames", ga.frames, "frames per live identity and per method");
  gen->add_option("--size", ga.size, "image side length in pixels");
  gen->add_option("--seed", ga.seed, "generator seed");
  gen->add_option("--out", ga.out, "output directory")->required();
  gen->add_flag("--ppm", ga.ppm, "also write PPM previews");

  SplitArgs sa;
  auto* spl = app.add_subcommand("split", "tag a manifest with a protocol split");
  spl->add_option("--manifest", sa.manifest, "manifest.tsv")->required();
  spl->add_option("--protocol", sa.protocol, "p1, p2, p3.1 or p3.2")
      ->check(CLI::IsMember({"p1", "p2", "p3.1", "p3.2"}));
  spl->add_option("--seed", sa.seed, "split seed");
  spl->add_option("--config", sa.config, "run configuration JSON (protocol proportions)");
  spl->add_option("--out", sa.out, "tagged manifest path (default: overwrite input)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train on the train records of a tagged manifest");
  trn->add_option("--config", ta.config, "run configuration JSON");
  trn->add_option("--manifest", ta.manifest, "tagged manifest.tsv")->required();
  trn->add_option("--stage", ta.stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  trn->add_option("--init", ta.init, "stage-1 checkpoint to continue from (stage 2)");
  trn->add_option("--checkpoint", ta.checkpoint, "output checkpoint")->required();
  trn->add_option("--trace", ta.trace, "write the loss trace as JSON lines");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "score a split with a trained checkpoint");
  evl->add_option("--config", ea.config, "run configuration JSON");
  evl->add_option("--manifest", ea.manifest, "tagged manifest.tsv")->required();
  evl->add_option("--checkpoint", ea.checkpoint, "checkpoint from 'train'")->required();
  evl->add_option("--split", ea.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  evl->add_option("--comparator", ea.comparators, "hiptune, clip-v, coop-unified, coop-specific (repeatable)")
      ->check(CLI::IsMember({"hiptune", "clip-v", "coop-unified", "coop-specific"}));
  evl->add_option("--out", ea.out, "write the report as JSON");
  evl->add_option("--format", ea.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "format one or more report files");
  rep->add_option("inputs", ra.inputs, "report JSON files")->required();
  rep->add_option("--format", ra.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
  rep->add_option("--out", ra.out, "output file (default stdout)");

  RunArgs rn;
  auto* run = app.add_subcommand("run", "generate, split, train and evaluate in one go");
  run->add_option("--config", rn.config, "run configuration JSON");
  run->add_option("--protocol", rn.protocol, "override the configured protocol")
      ->check(CLI::IsMember({"p1", "p2", "p3.1", "p3.2"}));
  run->add_option("--seed", rn.seeds, "run seed (repeatable)");
  run->add_option("--out", rn.out, "write the reports as JSON");
  run->add_option("--trace", rn.trace, "write the loss trace as JSON lines");
  run->add_option("--format", rn.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(ga);
    if (*spl) return cmd_split(sa);
    if (*trn) return cmd_train(ta);
    if (*evl) return cmd_eval(ea);
    if (*rep) return cmd_report(ra);
    if (*run) return cmd_run(rn);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
