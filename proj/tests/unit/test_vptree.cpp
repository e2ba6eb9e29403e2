#include "doctest.h"
#include "oracles.hpp"

#include "hiptune/dataset.hpp"
#include "hiptune/errors.hpp"
#include "hiptune/losses.hpp"
#include "hiptune/training.hpp"
#include "hiptune/vptree.hpp"

using namespace hiptune;

namespace {

HierPath chain(const AttackTaxonomy& t, const char* a, const char* b, const char* c) {
  return {t.find(a), t.find(b), t.find(c)};
}

int method_of(const AttackTaxonomy& t, const char* leaf) { return t.node(t.find(leaf)).method_ids.front(); }

}  // namespace

TEST_CASE("one block per node with the requested shape") {
  const AttackTaxonomy t = build_taxonomy();
  const PromptTree wide(t, 60, 768, 1);
  CHECK(wide.size() == 22);
  for (const auto& n : t.nodes()) {
    CHECK(wide.block(n.id).value.rows() == 60);
    CHECK(wide.block(n.id).value.cols() == 768);
  }
  const PromptTree one(t, 1, 64, 1);
  CHECK(one.block(5).value.rows() == 1);
  CHECK(PromptTree(t, 8, 64, 3).checksum() == PromptTree(t, 8, 64, 3).checksum());
  CHECK(PromptTree(t, 8, 64, 3).checksum() != PromptTree(t, 8, 64, 4).checksum());
  CHECK_THROWS_AS(PromptTree(t, 0, 64, 1), ConfigError);
  CHECK_THROWS_AS(wide.block(22), LabelError);
}

TEST_CASE("initialization is zero-mean with the configured spread") {
  const AttackTaxonomy t = build_taxonomy();
  const PromptTree tree(t, 60, 768, 9);
  double sum = 0.0, sq = 0.0;
  long n = 0;
  for (const Parameter* p : tree.parameters()) {
    sum += p->value.sum();
    sq += p->value.squaredNorm();
    n += p->value.size();
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  CHECK(std::abs(mean) < 1e-3);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.02));
}

TEST_CASE("trees refuse a different taxonomy") {
  const PromptTree tree(build_taxonomy(), 8, 64, 1);
  CHECK_NOTHROW(tree.check_compatible(build_taxonomy()));
  CHECK_THROWS_AS(tree.check_compatible(build_uniform_taxonomy(2)), ConfigError);
}

TEST_CASE("supervised path selection") {
  const AttackTaxonomy t = build_taxonomy();
  const SampleLabel print = SampleLabel::fake(t, 0, method_of(t, "print"));
  const PromptPath p = select_supervised_path(t, print);
  CHECK(p.nodes() == std::vector<NodeId>{t.find("physical"), t.find("2D"), t.find("print")});
  CHECK(p.entries[0].level == 1);
  CHECK(p.entries[2].level == 3);

  const SampleLabel pixel = SampleLabel::fake(t, 1, method_of(t, "pixel-level"));
  const PromptPath paired = select_supervised_path(t, SampleLabel::live(1), pixel);
  CHECK(paired.nodes() == std::vector<NodeId>{t.find("digital"), t.find("adversarial"), t.find("pixel-level")});

  const PromptPath alone = select_supervised_path(t, SampleLabel::live(1));
  CHECK(alone.is_live_only());
  CHECK(alone.nodes() == std::vector<NodeId>{t.live()});

  SampleLabel dangling = print;
  dangling.path->l3 = 999;
  CHECK_THROWS_AS(select_supervised_path(t, dangling), LabelError);
  CHECK(path_of(t, chain(t, "physical", "2D", "print")) == p);
}

TEST_CASE("integrate_prompts is the exact arithmetic mean") {
  std::mt19937_64 rng(3);
  const Matrix v = oracle::random_matrix(rng, 4, 6);
  CHECK((integrate_prompts(std::vector<Matrix>{v, v, v}) - v).cwiseAbs().maxCoeff() < 1e-15);
  const Matrix z = Matrix::Zero(4, 6);
  CHECK((integrate_prompts(std::vector<Matrix>{z, z, v}) - v / 3.0).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(integrate_prompts(std::vector<Matrix>{v}) == v);

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::random_matrix(rng, 4, 6), b = oracle::random_matrix(rng, 4, 6),
                 c = oracle::random_matrix(rng, 4, 6);
    Matrix expect(4, 6);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 6; ++j) expect(i, j) = (a(i, j) + b(i, j) + c(i, j)) / 3.0;
    }
    const Matrix got = integrate_prompts(std::vector<Matrix>{a, b, c});
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((integrate_prompts(std::vector<Matrix>{c, a, b}) - got).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK_THROWS_AS(integrate_prompts(std::vector<Matrix>{}), ShapeError);
  CHECK_THROWS_AS(integrate_prompts(std::vector<Matrix>{v, Matrix::Zero(3, 6)}), ShapeError);
}

TEST_CASE("encoder input assembly appends the prompt tokens") {
  ag::Tape tape;
  TokenSequence seq;
  seq.tokens = tape.constant(Matrix::Zero(65, 64));
  seq.n_image = 64;
  const TokenSequence out = assemble_encoder_input(seq, tape.constant(Matrix::Ones(8, 64)));
  CHECK(out.size() == 73);
  CHECK(out.n_prompt == 8);
  CHECK(out.tokens.value().bottomRows(8).isOnes());
  CHECK_NOTHROW(out.validate(64));

  TokenSequence big;
  big.tokens = tape.constant(Matrix::Zero(197, 768));
  big.n_image = 196;
  CHECK(assemble_encoder_input(big, tape.constant(Matrix::Zero(60, 768))).size() == 257);
  CHECK_THROWS_AS(assemble_encoder_input(seq, tape.constant(Matrix(0, 64))), ShapeError);
  CHECK_THROWS_AS(assemble_encoder_input(seq, tape.constant(Matrix::Zero(8, 32))), ShapeError);
}

namespace {

struct Smoke {
  AttackTaxonomy tax = build_taxonomy();
  Dataset ds;
  TrainingSet data;
  ModelConfig mc;
  Smoke() {
    GeneratorConfig gc;
    gc.n_identities = 2;
    gc.frames_per_method = 1;
    ds = generate_dataset(tax, gc);
    // Two live frames and six fakes spread over both fake branches.
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      const auto& r = ds.manifest.records[i];
      if (r.is_live || (*r.method % 9 == 0)) idx.push_back(i);
    }
    idx.resize(8);
    data = make_training_set(ds, idx);
    mc.encoder.n_layers = 2;
  }
};

// Stage-1 objective on the fakes of a set, evaluated without training.
double stage1_ce(const HiptuneModel& m, const TrainingSet& data) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i].is_live) continue;
    ag::Tape tape;
    const PromptPath path = select_supervised_path(m.taxonomy, data.labels[i]);
    TokenSequence tok = m.encoder.patch_embed(tape, *data.images[i]);
    ag::Var f = m.encoder.encode_image(tape, assemble_encoder_input(tok, integrate_prompts(path_blocks(tape, m.tree, path))));
    TextPrompts text =
        build_text_prompts(tape, m.taxonomy, supervised_mixtures(tape, m.taxonomy, *data.labels[i].path), m.tree, m.dpi);
    sum += cross_entropy_loss(score_feature(tape, f, text, m.encoder), {1}).scalar();
    ++n;
  }
  return sum / n;
}

double mean_internode_distance(const PromptTree& tree, const AttackTaxonomy& tax) {
  std::vector<Matrix> means;
  for (const auto& n : tax.nodes()) means.push_back(tree.block(n.id).value.colwise().mean());
  double s = 0.0;
  int k = 0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b, ++k) s += (means[a] - means[b]).norm();
  }
  return s / k;
}

}  // namespace

TEST_CASE("stage-1 smoke run") {
  Smoke s;
  HiptuneModel m(s.tax, s.mc, 3);
  m.encoder.freeze();
  LossConfig lc;
  lc.epochs_stage1 = 1;
  lc.batch_size = 4;
  const double before = stage1_ce(m, s.data);
  const double dist_before = mean_internode_distance(m.tree, s.tax);
  const std::uint64_t enc = m.encoder.checksum();
  const std::uint64_t tree = m.tree.checksum();
  TrainState st(5);
  train_stage1(m, s.data, lc, st);
  CHECK(stage1_ce(m, s.data) < before);
  CHECK(mean_internode_distance(m.tree, s.tax) > dist_before);
  CHECK(m.encoder.checksum() == enc);
  CHECK(m.tree.checksum() != tree);
  CHECK(st.stage == 1);
  CHECK(st.trace.series(1, "ce").size() == 1);
}

TEST_CASE("stage 1 with zero epochs leaves the tree untouched") {
  Smoke s;
  HiptuneModel m(s.tax, s.mc, 3);
  m.encoder.freeze();
  LossConfig lc;
  lc.epochs_stage1 = 0;
  const std::uint64_t tree = m.tree.checksum();
  TrainState st(5);
  train_stage1(m, s.data, lc, st);
  CHECK(m.tree.checksum() == tree);
}

TEST_CASE("stage 1 is deterministic and requires a frozen encoder") {
  Smoke s;
  LossConfig lc;
  lc.epochs_stage1 = 1;
  lc.batch_size = 4;
  auto run = [&] {
    HiptuneModel m(s.tax, s.mc, 3);
    m.encoder.freeze();
    TrainState st(5);
    train_stage1(m, s.data, lc, st);
    return std::make_pair(st.trace, m.tree.checksum());
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);

  HiptuneModel loose(s.tax, s.mc, 3);
  TrainState st(5);
  CHECK_THROWS_AS(train_stage1(loose, s.data, lc, st), InvariantViolation);
}
