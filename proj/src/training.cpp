#include "hiptune/training.hpp"

#include "hiptune/errors.hpp"
#include "hiptune/losses.hpp"
#include "hiptune/optim.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace hiptune {
namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

// Running means of named loss components over one epoch.
struct EpochMeans {
  std::map<std::string, std::pair<double, long>> sums;
  void add(const std::string& name, double v) {
    auto& s = sums[name];
    s.first += v;
    s.second += 1;
  }
  void flush(LossTrace& trace, long step, int stage) const {
    for (const auto& [name, s] : sums) trace.add(step, stage, name, s.first / static_cast<double>(s.second));
  }
};

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalDomainError(std::string(what) + " is not finite");
}

void require_unchanged(std::uint64_t before, std::uint64_t after, const char* what) {
  if (before != after) throw InvariantViolation(std::string(what) + " changed during training");
}

// Per-sample weights giving live and fake samples equal total weight,
// normalized to mean 1. The generated data holds one live frame per attack
// method, so unweighted losses would be dominated by fakes.
std::vector<double> balance_weights(const std::vector<SampleLabel>& labels) {
  std::size_t live = 0;
  for (const auto& l : labels) live += l.is_live ? 1 : 0;
  const std::size_t fake = labels.size() - live;
  std::vector<double> w(labels.size(), 1.0);
  if (live == 0 || fake == 0) return w;
  const double n = static_cast<double>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    w[i] = 0.5 * n / static_cast<double>(labels[i].is_live ? live : fake);
  }
  return w;
}

std::vector<Parameter*> concat(std::vector<Parameter*> a, const std::vector<Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

void ModelConfig::validate() const {
  encoder.validate();
  gates.validate();
  if (prompt_length < 1) throw ConfigError("prompt_length must be >= 1");
}

HiptuneModel::HiptuneModel(const AttackTaxonomy& taxonomy_, const ModelConfig& config_, std::uint64_t seed)
    : taxonomy(taxonomy_),
      config(config_),
      encoder(config_.encoder, mix(seed, 1)),
      tree(taxonomy_, config_.prompt_length, config_.encoder.visual_dim, mix(seed, 2)),
      gates(taxonomy_, config_.encoder.visual_dim, config_.gates, mix(seed, 3)),
      dpi(config_.encoder.visual_dim, config_.encoder.text_dim, config_.dpi_attention, mix(seed, 4)) {
  config_.validate();
}

void LossConfig::validate() const {
  if (!(margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
  if (!(lr_stage1 >= 0.0) || !(lr_stage2 >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs_stage1 < 0 || epochs_stage2 < 0) throw ConfigError("epochs must be >= 0");
}

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("pretrain lr must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain batch_size must be >= 1");
}

void BaselineTrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("baseline epochs must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("baseline lr must be >= 0");
  if (batch_size < 1) throw ConfigError("baseline batch_size must be >= 1");
}

void LossTrace::add(long step, int stage, const std::string& component, double value) {
  records_.push_back({step, stage, component, value});
}

std::vector<double> LossTrace::series(int stage, const std::string& component) const {
  std::vector<double> out;
  for (const auto& r : records_) {
    if (r.stage == stage && r.component == component) out.push_back(r.value);
  }
  return out;
}

void LossTrace::append(const LossTrace& other) {
  records_.insert(records_.end(), other.records_.begin(), other.records_.end());
}

std::string LossTrace::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : records_) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["stage"] = r.stage;
    j["component"] = r.component;
    j["value"] = r.value;
    os << j.dump() << '\n';
  }
  return os.str();
}

void LossTrace::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write loss trace " + path.string());
  f << to_jsonl();
}

void TrainState::enter(int next) {
  if (next != stage + 1 || next > 2) {
    throw InvariantViolation("training stage cannot move from " + std::to_string(stage) + " to " +
                             std::to_string(next));
  }
  stage = next;
  rng.seed(mix(seed, 100 + static_cast<std::uint64_t>(next)));
}

TrainingSet make_training_set(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  TrainingSet out;
  for (std::size_t i : indices) {
    if (i >= dataset.images.size()) throw ContractError("training index out of range");
    out.images.push_back(&dataset.images[i]);
    out.labels.push_back(dataset.manifest.records[i].label());
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) { return mix(seed, salt); }

int triplet_class(const AttackTaxonomy& taxonomy, const SampleLabel& label) {
  return label.is_live ? taxonomy.live() : label.path->l3;
}

Matrix plain_feature(const DualEncoder& encoder, const Image& image) {
  ag::Tape tape;
  return encoder.encode_image(tape, encoder.patch_embed(tape, image)).value();
}

LossTrace pretrain_encoder(DualEncoder& encoder, const TrainingSet& data, const PretrainConfig& config,
                           std::uint64_t seed) {
  config.validate();
  encoder.unfreeze();
  LossTrace trace;
  std::mt19937_64 rng(seed);
  auto params = encoder.parameters();
  Adam adam(params, {config.lr});
  const auto weight = balance_weights(data.labels);
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochMeans means;
    for (const auto& batch : make_batches(data.size(), config.batch_size, rng)) {
      GradientMap grads;
      for (std::size_t i : batch) {
        ag::Tape tape;
        tape.set_trainable(params);
        ag::Var f = encoder.encode_image(tape, encoder.patch_embed(tape, *data.images[i]));
        ag::Var probs = class_probabilities(f, template_weights(tape, encoder), encoder.config().temperature);
        ag::Var loss = cross_entropy_loss(probs, {data.labels[i].is_live ? 0 : 1});
        check_finite(loss.scalar(), "pretraining loss");
        means.add("ce", loss.scalar());
        tape.backward(ag::scale(loss, weight[i] / static_cast<double>(batch.size())));
        tape.collect_gradients(grads);
      }
      adam.step(grads);
      ++step;
    }
    means.flush(trace, step, 0);
  }
  encoder.freeze();
  return trace;
}

void train_stage1(HiptuneModel& model, const TrainingSet& data, const LossConfig& config,
                  TrainState& state) {
  config.validate();
  state.enter(1);
  model.encoder.require_frozen("stage 1");
  const std::uint64_t encoder_sum = model.encoder.checksum();
  const auto& tax = model.taxonomy;

  std::vector<std::size_t> fakes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data.labels[i].is_live) fakes.push_back(i);
  }

  auto trainable = concat(model.tree.parameters(), model.dpi.parameters());
  Adam adam(trainable, {config.lr_stage1});
  const auto weight = balance_weights(data.labels);

  for (int epoch = 0; epoch < config.epochs_stage1; ++epoch) {
    EpochMeans means;
    for (const auto& batch : make_batches(data.size(), config.batch_size, state.rng)) {
      // Pair every live sample with a fake: same identity in the batch if
      // possible, else any fake of the batch, else any fake at all.
      std::vector<std::optional<SampleLabel>> partner(batch.size());
      std::vector<std::size_t> batch_fakes;
      for (std::size_t i : batch) {
        if (!data.labels[i].is_live) batch_fakes.push_back(i);
      }
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const SampleLabel& l = data.labels[batch[b]];
        if (!l.is_live) continue;
        std::vector<std::size_t> same;
        for (std::size_t f : batch_fakes) {
          if (data.labels[f].identity == l.identity) same.push_back(f);
        }
        const auto& pool = !same.empty() ? same : !batch_fakes.empty() ? batch_fakes : fakes;
        if (pool.empty()) continue;
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        partner[b] = data.labels[pool[pick(state.rng)]];
      }

      GradientMap grads;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const SampleLabel& label = data.labels[batch[b]];
        ag::Tape tape;
        tape.set_trainable(trainable);
        PromptPath path = select_supervised_path(tax, label, partner[b]);
        TokenSequence tokens = model.encoder.patch_embed(tape, *data.images[batch[b]]);
        ag::Var prompt = integrate_prompts(path_blocks(tape, model.tree, path));
        ag::Var f = model.encoder.encode_image(tape, assemble_encoder_input(tokens, prompt));
        TextPrompts text;
        if (path.is_live_only()) {
          // No fake partner anywhere: the fake side sees the plain branch mix.
          RoutingDecision none;
          Matrix l1 = Matrix::Zero(1, static_cast<Index>(tax.level1().size()));
          none.logits.push_back(tape.constant(l1));
          none.probs.push_back(ag::softmax_rows(none.logits.back()));
          none.branches.push_back(-1);
          text = build_text_prompts(tape, tax, none, model.tree, model.dpi);
        } else {
          const HierPath chain{path.entries[0].node, path.entries[1].node, path.entries[2].node};
          text = build_text_prompts(tape, tax, supervised_mixtures(tape, tax, chain), model.tree, model.dpi);
        }
        ag::Var probs = score_feature(tape, f, text, model.encoder);
        ag::Var ce = cross_entropy_loss(probs, {label.is_live ? 0 : 1});
        check_finite(ce.scalar(), "stage-1 CE");
        means.add("ce", ce.scalar());
        tape.backward(ag::scale(ce, weight[batch[b]] * inv_b));
        tape.collect_gradients(grads);
      }

      // Triplet over the prompt tokens, one class per node.
      ag::Tape tape;
      tape.set_trainable(trainable);
      std::vector<ag::Var> rows;
      std::vector<int> classes;
      for (const auto& node : tax.nodes()) {
        rows.push_back(tape.param(model.tree.block(node.id)));
        classes.insert(classes.end(), static_cast<std::size_t>(model.tree.prompt_length()), node.id);
      }
      TripletResult tri = asymmetric_triplet_loss(ag::concat_rows(rows), classes, config.margin);
      check_finite(tri.loss.scalar(), "stage-1 triplet");
      means.add("triplet", tri.loss.scalar());
      if (config.triplet_weight != 0.0 && tri.loss.requires_grad()) {
        tape.backward(ag::scale(tri.loss, config.triplet_weight));
        tape.collect_gradients(grads);
      }

      adam.step(grads);
      ++state.step;
    }
    const auto ce = means.sums.at("ce");
    const auto tri = means.sums.at("triplet");
    means.sums["total"] = {ce.first / ce.second + config.triplet_weight * tri.first / tri.second, 1};
    means.flush(state.trace, state.step, 1);
    require_unchanged(encoder_sum, model.encoder.checksum(), "encoder weights");
  }
  require_unchanged(encoder_sum, model.encoder.checksum(), "encoder weights");
}

void train_stage2(HiptuneModel& model, const TrainingSet& data, const LossConfig& config,
                  TrainState& state) {
  config.validate();
  state.enter(2);
  model.encoder.require_frozen("stage 2");
  const std::uint64_t encoder_sum = model.encoder.checksum();
  const std::uint64_t tree_sum = model.tree.checksum();
  const auto& tax = model.taxonomy;

  auto trainable = concat(model.gates.parameters(), model.dpi.parameters());
  if (config.joint_finetune) trainable = concat(trainable, model.tree.parameters());
  Adam adam(trainable, {config.lr_stage2});
  const auto weight = balance_weights(data.labels);

  // With the encoder and prompts frozen, tokens and the image feature on
  // the labelled path are constants of each sample.
  std::vector<PromptPath> paths(data.size());
  std::vector<Matrix> token_cache(data.size()), feature_cache(data.size());
  std::vector<int> classes(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    paths[i] = select_supervised_path(tax, data.labels[i]);
    classes[i] = triplet_class(tax, data.labels[i]);
    if (config.joint_finetune) continue;
    ag::Tape tape;
    TokenSequence tokens = model.encoder.patch_embed(tape, *data.images[i]);
    token_cache[i] = tokens.tokens.value();
    ag::Var prompt = integrate_prompts(path_blocks(tape, model.tree, paths[i]));
    feature_cache[i] = model.encoder.encode_image(tape, assemble_encoder_input(tokens, prompt)).value();
  }
  const auto& enc = model.encoder.config();

  for (int epoch = 0; epoch < config.epochs_stage2; ++epoch) {
    EpochMeans means;
    double total_sum = 0.0;
    long total_n = 0;
    for (const auto& batch : make_batches(data.size(), config.batch_size, state.rng)) {
      GradientMap grads;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      std::vector<Matrix> feats;
      std::vector<int> batch_classes;
      double batch_total = 0.0;
      for (std::size_t i : batch) {
        ag::Tape tape;
        tape.set_trainable(trainable);
        TokenSequence tokens;
        ag::Var f;
        if (config.joint_finetune) {
          tokens = model.encoder.patch_embed(tape, *data.images[i]);
        } else {
          tokens.tokens = tape.constant(token_cache[i]);
          tokens.n_image = enc.n_image_tokens();
        }
        RoutingDecision d = route_sample(tape, tax, tokens, model.tree, model.gates, paths[i]);
        if (config.joint_finetune) {
          f = model.encoder.encode_image(tape, assemble_encoder_input(tokens, decision_prompt(tape, model.tree, d)));
        } else {
          f = tape.constant(feature_cache[i]);
        }
        feats.push_back(f.value());
        batch_classes.push_back(classes[i]);
        TextPrompts text = build_text_prompts(tape, tax, d, model.tree, model.dpi);
        ag::Var ce = cross_entropy_loss(score_feature(tape, f, text, model.encoder),
                                        {data.labels[i].is_live ? 0 : 1});
        std::vector<ag::Var> level_losses;
        for (int level = 0; level < d.levels(); ++level) {
          level_losses.push_back(cross_entropy_loss(d.probs[static_cast<std::size_t>(level)],
                                                    {d.indices[static_cast<std::size_t>(level)]}));
        }
        ag::Var routing = ag::mean_all(ag::concat_rows(level_losses));
        check_finite(ce.scalar(), "stage-2 CE");
        check_finite(routing.scalar(), "stage-2 routing CE");
        means.add("ce", ce.scalar());
        means.add("routing", routing.scalar());
        batch_total += (ce.scalar() + config.routing_weight * routing.scalar()) * weight[i] * inv_b;
        ag::Var loss = ag::add(ce, ag::scale(routing, config.routing_weight));
        tape.backward(ag::scale(loss, weight[i] * inv_b));
        tape.collect_gradients(grads);
      }

      // Triplet over image features. With frozen prompts the features are
      // constants, so this term is reported but carries no gradient.
      {
        ag::Tape tape;
        tape.set_trainable(trainable);
        Matrix stacked(static_cast<Index>(feats.size()), feats.front().cols());
        for (std::size_t k = 0; k < feats.size(); ++k) stacked.row(static_cast<Index>(k)) = feats[k];
        TripletResult tri = asymmetric_triplet_loss(tape.constant(stacked), batch_classes, config.margin);
        check_finite(tri.loss.scalar(), "stage-2 triplet");
        means.add("triplet", tri.loss.scalar());
        batch_total += config.triplet_weight * tri.loss.scalar();
      }
      total_sum += batch_total;
      ++total_n;

      adam.step(grads);
      ++state.step;
    }
    if (total_n > 0) {
      means.sums["total"] = {total_sum / static_cast<double>(total_n), 1};
      means.flush(state.trace, state.step, 2);
    }
    require_unchanged(encoder_sum, model.encoder.checksum(), "encoder weights");
    if (!config.joint_finetune) require_unchanged(tree_sum, model.tree.checksum(), "prompt tree");
  }
  require_unchanged(encoder_sum, model.encoder.checksum(), "encoder weights");
  if (!config.joint_finetune) require_unchanged(tree_sum, model.tree.checksum(), "prompt tree");
}

LossTrace train_coop(CoopBaseline& baseline, const DualEncoder& encoder, const TrainingSet& data,
                     const BaselineTrainConfig& config, std::uint64_t seed) {
  config.validate();
  encoder.require_frozen("baseline training");
  const std::uint64_t encoder_sum = encoder.checksum();
  std::vector<Matrix> feats;
  for (const Image* img : data.images) feats.push_back(plain_feature(encoder, *img));

  LossTrace trace;
  std::mt19937_64 rng(seed);
  auto params = baseline.parameters();
  Adam adam(params, {config.lr});
  const auto weight = balance_weights(data.labels);
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochMeans means;
    for (const auto& batch : make_batches(data.size(), config.batch_size, rng)) {
      ag::Tape tape;
      tape.set_trainable(params);
      // Class weights do not depend on the image: encode once per batch.
      ag::Var weights = baseline.text_weights(tape, encoder);
      Matrix stacked(static_cast<Index>(batch.size()), feats.front().cols());
      std::vector<int> labels;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        stacked.row(static_cast<Index>(k)) = feats[batch[k]];
        labels.push_back(data.labels[batch[k]].is_live ? 0 : 1);
      }
      ag::Var cos = ag::matmul_nt(ag::normalize_rows(tape.constant(stacked)), ag::normalize_rows(weights));
      ag::Var probs = ag::softmax_rows(ag::scale(cos, 1.0 / encoder.config().temperature));
      Matrix w(1, static_cast<Index>(batch.size()));
      for (std::size_t k = 0; k < batch.size(); ++k) w(0, static_cast<Index>(k)) = weight[batch[k]];
      std::vector<ag::Var> picked;
      for (std::size_t k = 0; k < batch.size(); ++k) picked.push_back(ag::element(probs, static_cast<Index>(k), labels[k]));
      ag::Var nll = ag::scale(ag::log_clamped(ag::concat_rows(picked), 1e-12), -1.0);
      ag::Var loss = ag::scale(ag::matmul(tape.constant(w), nll), 1.0 / static_cast<double>(batch.size()));
      check_finite(loss.scalar(), "baseline CE");
      means.add("baseline_ce", loss.scalar());
      tape.backward(loss);
      GradientMap grads;
      tape.collect_gradients(grads);
      adam.step(grads);
      ++step;
    }
    means.flush(trace, step, 1);
  }
  require_unchanged(encoder_sum, encoder.checksum(), "encoder weights");
  return trace;
}

}  // namespace hiptune
