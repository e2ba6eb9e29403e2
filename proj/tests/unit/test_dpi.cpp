#include "doctest.h"
#include "oracles.hpp"

#include "hiptune/dpi.hpp"
#include "hiptune/errors.hpp"
#include "hiptune/losses.hpp"
#include "hiptune/training.hpp"

#include <cmath>

using namespace hiptune;

namespace {

double max_abs(const Matrix& a) { return a.cwiseAbs().maxCoeff(); }

// Cross-level attention written out with explicit loops.
Matrix attention_mean(const std::vector<Matrix>& levels, const Matrix& wq, const Matrix& wk) {
  const Index rows = levels[0].rows(), d = levels[0].cols();
  const std::size_t n = levels.size();
  Matrix out = Matrix::Zero(rows, d);
  for (Index t = 0; t < rows; ++t) {
    std::vector<Matrix> q(n), k(n);
    for (std::size_t i = 0; i < n; ++i) {
      q[i] = levels[i].row(t) * wq;
      k[i] = levels[i].row(t) * wk;
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = q[i].cwiseProduct(k[j]).sum() / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      for (std::size_t j = 0; j < n; ++j) z += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < n; ++j) out.row(t) += std::exp(s[j] - mx) / z * levels[j].row(t) / static_cast<double>(n);
    }
  }
  return out;
}

struct Parts {
  AttackTaxonomy t = build_taxonomy();
  HiptuneModel m;
  Parts() : m(t, small(), 3) {}
  static ModelConfig small() {
    ModelConfig c;
    c.encoder.n_layers = 2;
    c.prompt_length = 4;
    return c;
  }
};

RoutingDecision one_hot_decision(ag::Tape& tape, const AttackTaxonomy& t, const HierPath& p) {
  RoutingDecision d;
  const std::vector<NodeId> l1 = t.level1();
  auto push = [&](NodeId branch, const std::vector<NodeId>& cand, NodeId pick, double big) {
    Matrix logits = Matrix::Constant(1, static_cast<Index>(cand.size()), -big);
    const auto idx = std::find(cand.begin(), cand.end(), pick) - cand.begin();
    logits(0, idx) = big;
    d.logits.push_back(tape.constant(logits));
    d.probs.push_back(ag::softmax_rows(d.logits.back()));
    d.distributions.push_back(d.probs.back().value());
    d.branches.push_back(branch);
    d.indices.push_back(static_cast<int>(idx));
    d.nodes.push_back(pick);
  };
  push(-1, l1, p.l1, 400.0);
  push(p.l1, t.children(p.l1), p.l2, 400.0);
  push(p.l2, t.children(p.l2), p.l3, 400.0);
  return d;
}

}  // namespace

TEST_CASE("weighted level prompt") {
  std::mt19937_64 rng(41);
  const Matrix a = oracle::random_matrix(rng, 3, 5), b = oracle::random_matrix(rng, 3, 5);
  Matrix p(1, 2);
  p << 1.0, 0.0;
  CHECK(weighted_level_prompt(p, {a, b}) == a);
  p << 0.5, 0.5;
  CHECK(max_abs(weighted_level_prompt(p, {a, b}) - (a + b) / 2.0) < 1e-15);
  Matrix p3(1, 3);
  p3 << 0.2, 0.3, 0.5;
  const Matrix c = oracle::random_matrix(rng, 3, 5);
  CHECK(max_abs(weighted_level_prompt(p3, {a, b, c}) - (0.2 * a + 0.3 * b + 0.5 * c)) < 1e-14);
  CHECK_THROWS_AS(weighted_level_prompt(p3, {a, b}), ShapeError);
  CHECK_THROWS_AS(weighted_level_prompt(p, {a, Matrix::Zero(2, 5)}), ShapeError);

  ag::Tape tape;
  Matrix l1(1, 3);
  l1 << 9.0, 1.0, 1.0;
  const Matrix w = level1_fake_weights(tape.constant(l1)).value();
  CHECK(w.cols() == 2);
  CHECK(w(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(w(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("integrate_levels matches a loop implementation") {
  std::mt19937_64 rng(42);
  DpiParams dpi(6, 4, true, 1, 0.5);
  std::vector<Matrix> levels{oracle::random_matrix(rng, 3, 6), oracle::random_matrix(rng, 3, 6),
                             oracle::random_matrix(rng, 3, 6)};
  ag::Tape tape;
  std::vector<ag::Var> vars;
  for (const auto& l : levels) vars.push_back(tape.constant(l));
  CHECK(max_abs(integrate_levels(tape, vars, dpi).value() - attention_mean(levels, dpi.wq.value, dpi.wk.value)) < 1e-12);
  CHECK(integrate_levels(tape, {vars[0]}, dpi).value() == levels[0]);
  dpi.set_attention(false);
  CHECK(max_abs(integrate_levels(tape, vars, dpi).value() - (levels[0] + levels[1] + levels[2]) / 3.0) < 1e-15);
}

TEST_CASE("one-hot routing builds the fake context from the routed path only") {
  Parts s;
  auto& m = s.m;
  const HierPath p{s.t.find("digital"), s.t.find("generation"), s.t.find("style-transfer")};
  ag::Tape tape;
  const RoutingDecision d = one_hot_decision(tape, s.t, p);
  const TextPrompts tp = build_text_prompts(tape, s.t, d, m.tree, m.dpi);
  const Matrix expect = attention_mean({m.tree.block(p.l1).value, m.tree.block(p.l2).value, m.tree.block(p.l3).value},
                                       m.dpi.wq.value, m.dpi.wk.value) *
                        m.dpi.proj.value;
  CHECK(max_abs(tp.fake.value() - expect) < 1e-12);
  CHECK(max_abs(tp.live.value() - m.tree.block(s.t.live()).value * m.dpi.proj.value) < 1e-15);
  CHECK(tp.fake.rows() == 4);
  CHECK(tp.fake.cols() == 32);

  // Off-path blocks can change freely.
  for (const auto& n : s.t.nodes()) {
    if (n.id != p.l1 && n.id != p.l2 && n.id != p.l3 && n.id != s.t.live()) m.tree.block(n.id).value.setConstant(5.0);
  }
  ag::Tape t2;
  CHECK(max_abs(build_text_prompts(t2, s.t, one_hot_decision(t2, s.t, p), m.tree, m.dpi).fake.value() - expect) < 1e-12);
}

TEST_CASE("a live stop builds the fake context from level one only") {
  Parts s;
  auto& m = s.m;
  ag::Tape tape;
  RoutingDecision d;
  Matrix l1(1, 3);
  l1 << 2.0, 0.3, -0.4;
  d.logits.push_back(tape.constant(l1));
  d.probs.push_back(ag::softmax_rows(d.logits.back()));
  d.distributions.push_back(d.probs.back().value());
  d.branches.push_back(-1);
  d.indices.push_back(0);
  d.nodes.push_back(s.t.live());
  d.stopped_at_live = true;
  const double e3 = std::exp(0.3), e4 = std::exp(-0.4);
  const Matrix mix = (e3 * m.tree.block(s.t.find("physical")).value + e4 * m.tree.block(s.t.find("digital")).value) / (e3 + e4);
  const TextPrompts tp = build_text_prompts(tape, s.t, d, m.tree, m.dpi);
  CHECK(max_abs(tp.fake.value() - mix * m.dpi.proj.value) < 1e-12);
  RoutingDecision empty;
  CHECK_THROWS_AS(build_text_prompts(tape, s.t, empty, m.tree, m.dpi), ContractError);
}

TEST_CASE("identical blocks give identical live and fake contexts") {
  Parts s;
  auto& m = s.m;
  std::mt19937_64 rng(43);
  const Matrix v = oracle::random_matrix(rng, 4, 64);
  for (Parameter* p : m.tree.parameters()) p->value = v;
  ag::Tape tape;
  const TokenSequence tok = m.encoder.patch_embed(tape, Image{3, 32, 32, std::vector<float>(3072, 0.3f)});
  const RoutingDecision d = route_sample(tape, s.t, tok, m.tree, m.gates);
  const TextPrompts tp = build_text_prompts(tape, s.t, d, m.tree, m.dpi);
  CHECK(max_abs(tp.live.value() - tp.fake.value()) < 1e-6);
}

TEST_CASE("without attention the contexts scale linearly with the prompts") {
  Parts s;
  auto& m = s.m;
  m.dpi.set_attention(false);
  const HierPath p{s.t.find("physical"), s.t.find("3D"), s.t.find("plaster")};
  ag::Tape tape;
  const TextPrompts base = build_text_prompts(tape, s.t, one_hot_decision(tape, s.t, p), m.tree, m.dpi);
  for (Parameter* q : m.tree.parameters()) q->value *= 2.5;
  ag::Tape t2;
  const TextPrompts scaled = build_text_prompts(t2, s.t, one_hot_decision(t2, s.t, p), m.tree, m.dpi);
  CHECK(max_abs(scaled.fake.value() - 2.5 * base.fake.value()) < 1e-12);
  CHECK(max_abs(scaled.live.value() - 2.5 * base.live.value()) < 1e-12);
}

TEST_CASE("hiptune_score probabilities") {
  Parts s;
  const auto& m = s.m;
  const AttackTaxonomy& t = s.t;
  GeneratorConfig gc;
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 5; ++trial) {
    const Image img = render_sample(t, gc, SampleLabel::fake(t, trial, trial * 7), 0);
    ag::Tape tape;
    const ScoreResult r = m.score(tape, img);
    CHECK(std::abs(r.p_live() + r.p_fake() - 1.0) < 1e-6);
    ag::Tape t2;
    const ScoreResult again = m.score(t2, img);
    CHECK(again.probs.value() == r.probs.value());
    CHECK(again.decision.indices == r.decision.indices);
    // Cosine head: rescaling the image feature changes nothing.
    const TextPrompts tp = build_text_prompts(tape, t, r.decision, m.tree, m.dpi);
    const Matrix scaled = score_feature(tape, ag::scale(r.feature, 4.0), tp, m.encoder).value();
    CHECK(max_abs(scaled - r.probs.value()) < 1e-12);
  }
}

TEST_CASE("full scoring pipeline gradient w.r.t. prompt tokens matches finite differences") {
  Parts s;
  auto& m = s.m;
  m.encoder.freeze();
  GeneratorConfig gc;
  std::mt19937_64 rng(45);
  const Image img = render_sample(s.t, gc, SampleLabel::fake(s.t, 0, 20), 0);
  // Probes on blocks the sample is routed through, plus the live block.
  ag::Tape probe_tape;
  const RoutingDecision route = m.score(probe_tape, img).decision;
  std::vector<NodeId> nodes = route.nodes;
  nodes.push_back(s.t.live());
  nodes.push_back(s.t.find("physical"));
  nodes.push_back(s.t.find("digital"));

  auto loss = [&](ag::Tape& tape) { return cross_entropy_loss(m.score(tape, img).probs, {1}); };
  ag::Tape tape;
  tape.set_trainable(m.tree.parameters());
  tape.backward(loss(tape));
  GradientMap grads;
  tape.collect_gradients(grads);

  std::uniform_int_distribution<std::size_t> pick_node(0, nodes.size() - 1);
  std::uniform_int_distribution<int> row(0, 3), col(0, 63);
  int checked = 0;
  for (int probe = 0; probe < 10; ++probe) {
    Parameter& block = m.tree.block(nodes[pick_node(rng)]);
    const int r = row(rng), c = col(rng);
    const double analytic = grads.count(&block) ? grads.at(&block)(r, c) : 0.0;
    const double fd = oracle::central_difference(block.value, r, c, [&] {
      ag::Tape t;
      const ScoreResult sr = m.score(t, img);
      REQUIRE(sr.decision.indices == route.indices);  // no routing flip inside the stencil
      return cross_entropy_loss(sr.probs, {1}).scalar();
    });
    CHECK(oracle::rel_error(analytic, fd) < 1e-4);
    ++checked;
  }
  CHECK(checked == 10);
}
