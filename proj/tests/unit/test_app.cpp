#include "doctest.h"
#include "oracles.hpp"

#include "hiptune/app.hpp"
#include "hiptune/errors.hpp"

#include <cmath>

using namespace hiptune;

namespace {

double max_abs(const Matrix& a) { return a.cwiseAbs().maxCoeff(); }

TokenSequence random_tokens(ag::Tape& tape, std::mt19937_64& rng, int side, int dim) {
  TokenSequence t;
  t.tokens = tape.constant(oracle::random_matrix(rng, side * side + 1, dim));
  t.n_image = side * side;
  return t;
}

}  // namespace

TEST_CASE("vanilla and central difference convolution against loops") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> size(5, 9), chans(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = size(rng), w = size(rng), cin = chans(rng), cout = chans(rng);
    const Matrix x = oracle::random_matrix(rng, h * w, cin);
    const Matrix k = oracle::random_matrix(rng, 9 * cin, cout);
    const Matrix vanilla = oracle::conv_loops(x, h, w, k);
    CHECK(max_abs(conv3x3(x, h, w, k) - vanilla) < 1e-6);
    CHECK(max_abs(cdc_conv(x, h, w, k, 0.0) - vanilla) < 1e-6);
    CHECK(max_abs(cdc_conv(x, h, w, k, 0.7) - oracle::conv_loops(x, h, w, k, 1, 0.7)) < 1e-6);
    CHECK(max_abs(conv3x3(x, h, w, k, 2) - oracle::conv_loops(x, h, w, k, 2)) < 1e-6);
  }
}

TEST_CASE("central difference of a constant map vanishes in the interior") {
  std::mt19937_64 rng(22);
  const int h = 6, w = 7;
  const Matrix x = Matrix::Constant(h * w, 2, 1.7);
  const Matrix k = oracle::random_matrix(rng, 18, 3);
  const Matrix y = cdc_conv(x, h, w, k, 1.0);
  for (int py = 1; py < h - 1; ++py) {
    for (int px = 1; px < w - 1; ++px) CHECK(y.row(py * w + px).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(cdc_conv(x, h, w, k, 1.5), ConfigError);
  CHECK_THROWS_AS(cdc_conv(x, h, w, Matrix::Zero(9, 3), 0.5), ShapeError);
}

TEST_CASE("frequency adaptive convolution against loops with its dilation map") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> size(5, 9), chans(1, 3);
  std::vector<int> used(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = size(rng), w = size(rng), cin = chans(rng), cout = chans(rng);
    Matrix x = oracle::random_matrix(rng, h * w, cin);
    // Smooth half the maps so larger dilations get exercised.
    if (trial % 2) {
      for (int py = 0; py < h; ++py) {
        for (int px = 0; px < w; ++px) {
          for (int c = 0; c < cin; ++c) x(py * w + px, c) = std::sin(0.3 * py + 0.2 * px + c) + (px > w / 2 ? 3.0 * x(py * w + px, c) : 0.0);
        }
      }
    }
    const Matrix k = oracle::random_matrix(rng, 9 * cin, cout);
    std::vector<int> dil;
    const Matrix y = fadc_conv(x, h, w, k, {}, &dil);
    REQUIRE(dil.size() == static_cast<std::size_t>(h * w));
    CHECK(dil == fadc_dilation_map(x, h, w));
    for (int d : dil) {
      CHECK((d >= 1 && d <= 3));
      used[static_cast<std::size_t>(d)]++;
    }
    CHECK(max_abs(y - oracle::conv_loops(x, h, w, k, dil)) < 1e-6);
    CHECK(max_abs(fadc_conv(x, h, w, k, FadcOptions{1}) - oracle::conv_loops(x, h, w, k)) < 1e-6);
  }
  CHECK(used[1] > 0);
  CHECK(used[2] + used[3] > 0);
}

TEST_CASE("constant input selects dilation one everywhere") {
  const Matrix x = Matrix::Constant(36, 3, -0.4);
  for (int d : fadc_dilation_map(x, 6, 6)) CHECK(d == 1);
}

TEST_CASE("convolution gradients match finite differences") {
  std::mt19937_64 rng(24);
  const int h = 5, w = 6, cin = 2, cout = 3;
  Matrix x = oracle::random_matrix(rng, h * w, cin);
  Matrix k = oracle::random_matrix(rng, 9 * cin, cout);
  const Matrix r = oracle::random_matrix(rng, h * w, cout);
  const auto dil = fadc_dilation_map(x, h, w);
  using Fn = std::function<ag::Var(const ag::Var&, const ag::Var&)>;
  const std::vector<Fn> fns{
      [&](const ag::Var& a, const ag::Var& b) { return cdc_conv(a, h, w, b, 0.7); },
      [&](const ag::Var& a, const ag::Var& b) { return fadc_conv(a, h, w, b, FadcOptions{2}).output; },
  };
  for (const auto& fn : fns) {
    auto loss = [&](ag::Tape& t, const ag::Var& a, const ag::Var& b) { return ag::sum_all(ag::mul(fn(a, b), t.constant(r))); };
    ag::Tape tape;
    ag::Var vx = tape.variable(x), vk = tape.variable(k);
    tape.backward(loss(tape, vx, vk));
    const Matrix gx = tape.grad(vx), gk = tape.grad(vk);
    for (int probe = 0; probe < 10; ++probe) {
      const int i = probe % (h * w), c = probe % cin, j = (probe * 7) % (9 * cin), o = probe % cout;
      auto eval = [&] {
        ag::Tape t;
        return loss(t, t.constant(x), t.constant(k)).scalar();
      };
      CHECK(oracle::rel_error(gx(i, c), oracle::central_difference(x, i, c, eval)) < 1e-4);
      CHECK(oracle::rel_error(gk(j, o), oracle::central_difference(k, j, o, eval)) < 1e-4);
    }
  }
}

TEST_CASE("gate arities follow the taxonomy") {
  const AttackTaxonomy t = build_taxonomy();
  const GateParams g(t, 16, {}, 1);
  CHECK(g.w1.value.rows() == 16);
  CHECK(g.w1.value.cols() == 3);
  CHECK(g.gates().size() == 7);
  for (const auto& [branch, gate] : g.gates()) {
    CHECK(gate.arity() == static_cast<int>(t.children(branch).size()));
    CHECK(gate.level == t.node(branch).level + 1);
    NodeId top = branch;
    while (t.node(top).parent) top = *t.node(top).parent;
    CHECK(gate.kind == (top == t.find("physical") ? ConvKind::Cdc : ConvKind::Fadc));
    CHECK(gate.kernel.value.rows() == 9 * 16);
  }
  CHECK(g.gate(t.find("2D")).arity() == 3);
  CHECK(g.gate(t.find("adversarial")).arity() == 2);
  GateConfig bad;
  bad.theta = -0.1;
  CHECK_THROWS_AS(GateParams(t, 16, bad, 1), ConfigError);
}

TEST_CASE("level-1 gate") {
  const AttackTaxonomy t = build_taxonomy();
  GateParams g(t, 8, {}, 2);
  g.w1.value.setZero();
  g.b1.value << 1.0, 2.0, 3.0;
  std::mt19937_64 rng(25);
  ag::Tape tape;
  const TokenSequence tok = random_tokens(tape, rng, 4, 8);
  const Matrix s = gate_level1(tape, tok, g).value();
  CHECK(s(0, 0) == 1.0);
  CHECK(s(0, 1) == 2.0);
  CHECK(s(0, 2) == 3.0);
  const Matrix p = ag::softmax_rows(tape.constant(s)).value();
  CHECK(p(0, 0) == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(p(0, 1) == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(p(0, 2) == doctest::Approx(0.6652).epsilon(1e-3));
  CHECK(argmax_lowest(s) == 2);

  // Mean of per-token logits, and permuting W's columns permutes scores.
  GateParams r(t, 8, {}, 3);
  const Matrix base = gate_level1(tape, tok, r).value();
  const Matrix x = tok.tokens.value();
  const Matrix direct = ((x * r.w1.value).rowwise() + r.b1.value.row(0)).colwise().mean();
  CHECK(max_abs(base - direct) < 1e-12);
  GateParams q = r;
  q.w1.value.col(0) = r.w1.value.col(2);
  q.w1.value.col(2) = r.w1.value.col(0);
  q.b1.value(0, 0) = r.b1.value(0, 2);
  q.b1.value(0, 2) = r.b1.value(0, 0);
  const Matrix perm = gate_level1(tape, tok, q).value();
  CHECK(std::abs(perm(0, 0) - base(0, 2)) < 1e-12);
  CHECK(std::abs(perm(0, 2) - base(0, 0)) < 1e-12);
  CHECK(std::abs(perm(0, 1) - base(0, 1)) < 1e-12);
}

TEST_CASE("pooled conv gates equal averaged per-location logits") {
  const AttackTaxonomy t = build_taxonomy();
  const int dim = 6, side = 5;
  GateParams g(t, dim, {}, 4);
  std::mt19937_64 rng(26);
  for (auto& [branch, gate] : g.gates()) {
    gate.kernel.value = oracle::random_matrix(rng, 9 * dim, dim);
    gate.head_w.value = oracle::random_matrix(rng, dim, gate.arity());
    gate.head_b.value = oracle::random_matrix(rng, 1, gate.arity());
  }
  for (const auto& [branch, gate] : g.gates()) {
    ag::Tape tape;
    const TokenSequence tok = random_tokens(tape, rng, side, dim);
    const Matrix cond = oracle::random_matrix(rng, 1, dim);
    const Matrix grid = tok.image_tokens().value();
    std::vector<int> dil(side * side, 1);
    if (gate.kind == ConvKind::Fadc) dil = fadc_dilation_map(grid, side, side);
    const double theta = gate.kind == ConvKind::Cdc ? g.theta() : 0.0;
    const Matrix map = oracle::conv_loops(grid, side, side, gate.kernel.value, dil, theta);
    Matrix logits = Matrix::Zero(1, gate.arity());
    for (int p = 0; p < side * side; ++p) logits += (map.row(p) + cond) * gate.head_w.value + gate.head_b.value;
    logits /= side * side;
    const Matrix got = gate_conv(tape, gate.level, branch, tok, tape.constant(cond), g).value();
    CHECK(max_abs(got - logits) < 1e-10);
  }
}

TEST_CASE("conv gate degenerate weights and errors") {
  const AttackTaxonomy t = build_taxonomy();
  GateParams g(t, 4, {}, 5);
  const NodeId two_d = t.find("2D");
  g.gate(two_d).kernel.value.setZero();
  g.gate(two_d).head_b.value << 0.1, -0.2, 0.3;
  std::mt19937_64 rng(27);
  ag::Tape tape;
  const TokenSequence tok = random_tokens(tape, rng, 4, 4);
  const Matrix s = gate_conv(tape, 3, two_d, tok, tape.constant(Matrix::Zero(1, 4)), g).value();
  CHECK(max_abs(s - g.gate(two_d).head_b.value) < 1e-15);
  g.gate(two_d).head_w.value.setZero();
  g.gate(two_d).kernel.value.setRandom();
  const Matrix s2 = gate_conv(tape, 3, two_d, tok, tape.constant(Matrix::Ones(1, 4)), g).value();
  CHECK(max_abs(s2 - g.gate(two_d).head_b.value) < 1e-15);

  CHECK_THROWS_AS(gate_conv(tape, 2, two_d, tok, tape.constant(Matrix::Zero(1, 4)), g), ContractError);
  TokenSequence ragged;
  ragged.tokens = tape.constant(Matrix::Zero(11, 4));
  ragged.n_image = 10;
  CHECK_THROWS_AS(gate_conv(tape, 3, two_d, ragged, tape.constant(Matrix::Zero(1, 4)), g), ShapeError);
}

namespace {

struct Router {
  AttackTaxonomy t = build_taxonomy();
  PromptTree tree{t, 4, 8, 1};
  GateParams g{t, 8, {}, 6};
  void zero_weights() {
    g.w1.value.setZero();
    g.b1.value.setZero();
    for (auto& [branch, gate] : g.gates()) {
      gate.head_w.value.setZero();
      gate.head_b.value.setZero();
    }
  }
};

}  // namespace

TEST_CASE("forced logits route to the expected path") {
  Router r;
  r.zero_weights();
  r.g.b1.value << 0.0, 0.0, 1.0;
  r.g.gate(r.t.find("digital")).head_b.value << 0.0, 1.0, 0.0;
  r.g.gate(r.t.find("adversarial")).head_b.value << 1.0, 0.0;
  std::mt19937_64 rng(28);
  ag::Tape tape;
  const RoutingDecision d = route_sample(tape, r.t, random_tokens(tape, rng, 4, 8), r.tree, r.g);
  CHECK(d.indices == std::vector<int>{2, 1, 0});
  CHECK(d.nodes == std::vector<NodeId>{r.t.find("digital"), r.t.find("adversarial"), r.t.find("pixel-level")});
  CHECK_FALSE(d.stopped_at_live);
  CHECK(d.hier_path() == HierPath{r.t.find("digital"), r.t.find("adversarial"), r.t.find("pixel-level")});
}

TEST_CASE("live routes stop after level one and ties go to the lowest index") {
  Router r;
  r.zero_weights();
  std::mt19937_64 rng(29);
  ag::Tape tape;
  const RoutingDecision d = route_sample(tape, r.t, random_tokens(tape, rng, 4, 8), r.tree, r.g);
  CHECK(d.stopped_at_live);
  CHECK(d.levels() == 1);
  CHECK(d.indices == std::vector<int>{0});
  CHECK(d.path().is_live_only());
  CHECK_THROWS_AS(d.hier_path(), ContractError);
  Matrix tie(1, 3);
  tie << 0.5, 0.5, 0.2;
  CHECK(argmax_lowest(tie) == 0);
  tie << 0.1, 0.7, 0.7;
  CHECK(argmax_lowest(tie) == 1);
}

TEST_CASE("routing distributions are normalized and match the chosen index") {
  Router r;
  std::mt19937_64 rng(30);
  for (auto& [branch, gate] : r.g.gates()) gate.head_b.value = oracle::random_matrix(rng, 1, gate.arity(), 0.5);
  r.g.b1.value << -1.0, 0.5, 0.4;
  for (int trial = 0; trial < 50; ++trial) {
    ag::Tape tape;
    const TokenSequence tok = random_tokens(tape, rng, 4, 8);
    const RoutingDecision d = route_sample(tape, r.t, tok, r.tree, r.g);
    for (int l = 0; l < d.levels(); ++l) {
      const Matrix& p = d.distributions[static_cast<std::size_t>(l)];
      CHECK(std::abs(p.sum() - 1.0) < 1e-6);
      CHECK(argmax_lowest(p) == d.indices[static_cast<std::size_t>(l)]);
      // Adding a constant to the logits keeps the index.
      const Matrix shifted = d.logits[static_cast<std::size_t>(l)].value().array() + 3.7;
      CHECK(argmax_lowest(shifted) == d.indices[static_cast<std::size_t>(l)]);
    }
  }
}

TEST_CASE("teacher forcing follows the given path") {
  Router r;
  std::mt19937_64 rng(31);
  ag::Tape tape;
  const TokenSequence tok = random_tokens(tape, rng, 4, 8);
  const PromptPath want = path_of(r.t, {r.t.find("physical"), r.t.find("3D"), r.t.find("resin")});
  const RoutingDecision d = route_sample(tape, r.t, tok, r.tree, r.g, want);
  CHECK(d.teacher_forced);
  CHECK(d.path() == want);
  CHECK(d.distributions.size() == 3);
  PromptPath off = want;
  off.entries[2].node = r.t.find("print");
  CHECK_THROWS_AS(route_sample(tape, r.t, tok, r.tree, r.g, off), LabelError);
  const PromptTree other(build_uniform_taxonomy(2), 4, 8, 1);
  CHECK_THROWS_AS(route_sample(tape, r.t, tok, other, r.g), ConfigError);
}
