#include "doctest.h"
#include "oracles.hpp"

#include "hiptune/dataset.hpp"
#include "hiptune/encoders.hpp"
#include "hiptune/errors.hpp"
#include "hiptune/losses.hpp"
#include "hiptune/training.hpp"
#include "hiptune/vptree.hpp"

#include <cmath>

using namespace hiptune;

namespace {

Parameter& named(DualEncoder& enc, const std::string& name) {
  for (Parameter* p : enc.parameters()) {
    if (p->name == name) return *p;
  }
  throw std::runtime_error("no parameter " + name);
}

Image random_image(std::mt19937_64& rng, int size = 32) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img{3, size, size, std::vector<float>(static_cast<std::size_t>(3 * size * size))};
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST_CASE("patch embedding token counts") {
  const DualEncoder desk(EncoderConfig{}, 1);
  std::mt19937_64 rng(1);
  ag::Tape tape;
  TokenSequence seq = desk.patch_embed(tape, random_image(rng));
  CHECK(seq.tokens.rows() == 65);
  CHECK(seq.tokens.cols() == 64);
  CHECK(seq.n_cls == 1);
  CHECK(seq.n_image == 64);
  CHECK(seq.n_prompt == 0);

  EncoderConfig big;
  big.image_size = 224;
  big.patch_size = 16;
  big.visual_dim = 768;
  big.n_layers = 1;
  const DualEncoder vit(big, 1);
  ag::Tape t2;
  const TokenSequence s2 = vit.patch_embed(t2, random_image(rng, 224));
  CHECK(s2.tokens.rows() == 197);
  CHECK(s2.tokens.cols() == 768);
}

TEST_CASE("zero image gives positional embeddings plus bias terms") {
  DualEncoder enc(EncoderConfig{}, 4);
  named(enc, "vision.patch.b").value.setConstant(0.25);
  const Image zero{3, 32, 32, std::vector<float>(3 * 32 * 32, 0.0f)};
  ag::Tape tape;
  const Matrix tok = enc.patch_embed(tape, zero).tokens.value();
  const Matrix& pos = named(enc, "vision.pos").value;
  const Matrix& cls = named(enc, "vision.cls").value;
  CHECK((tok.row(0) - (cls.row(0) + pos.row(0))).cwiseAbs().maxCoeff() < 1e-15);
  for (int i = 1; i < 65; ++i) {
    CHECK((tok.row(i).array() - (pos.row(i).array() + 0.25)).abs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("patch embedding rejects a wrong image shape") {
  const DualEncoder enc(EncoderConfig{}, 1);
  std::mt19937_64 rng(2);
  ag::Tape tape;
  try {
    enc.patch_embed(tape, random_image(rng, 16));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
}

TEST_CASE("encoder config validation") {
  EncoderConfig c;
  c.image_size = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("image encoding is pure and sees prompt tokens and token order") {
  const DualEncoder enc(EncoderConfig{}, 5);
  std::mt19937_64 rng(3);
  const Image img = random_image(rng);
  ag::Tape tape;
  TokenSequence seq = enc.patch_embed(tape, img);
  const Matrix f1 = enc.encode_image(tape, seq).value();
  const Matrix f2 = enc.encode_image(tape, seq).value();
  CHECK(f1 == f2);
  CHECK(f1.rows() == 1);
  CHECK(f1.cols() == 64);

  const Matrix with_zero = enc.encode_image(tape, assemble_encoder_input(seq, tape.constant(Matrix::Zero(8, 64)))).value();
  CHECK((with_zero - f1).norm() > 1e-9);

  // Once positions are added, attention is permutation-equivariant, so
  // reordering embedded tokens leaves the class-token feature alone.
  Matrix swapped = seq.tokens.value();
  swapped.row(1).swap(swapped.row(2));
  TokenSequence perm = seq;
  perm.tokens = tape.constant(swapped);
  CHECK((enc.encode_image(tape, perm).value() - f1).norm() < 1e-9);

  // Swapping two image patches moves content across positions.
  Image moved = img;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        std::swap(moved.data[static_cast<std::size_t>((c * 32 + y) * 32 + x)],
                  moved.data[static_cast<std::size_t>((c * 32 + y) * 32 + x + 4)]);
      }
    }
  }
  CHECK((enc.encode_image(tape, enc.patch_embed(tape, moved)).value() - f1).norm() > 1e-9);
}

TEST_CASE("prompt-token gradient of the encoder matches finite differences") {
  DualEncoder enc(EncoderConfig{}, 6);
  enc.freeze();
  std::mt19937_64 rng(4);
  const Image img = random_image(rng);
  Matrix prompt = oracle::random_matrix(rng, 5, 64, 0.5);
  auto loss_of = [&](ag::Tape& tape, const ag::Var& p) {
    TokenSequence seq = enc.patch_embed(tape, img);
    ag::Var f = enc.encode_image(tape, assemble_encoder_input(seq, p));
    return cross_entropy_loss(class_probabilities(f, template_weights(tape, enc), 0.07), {1});
  };
  ag::Tape tape;
  ag::Var p = tape.variable(prompt);
  tape.backward(loss_of(tape, p));
  const Matrix g = tape.grad(p);
  const std::uint64_t before = enc.checksum();
  std::uniform_int_distribution<int> row(0, 4), col(0, 63);
  for (int probe = 0; probe < 10; ++probe) {
    const int r = row(rng), c = col(rng);
    const double fd = oracle::central_difference(prompt, r, c, [&] {
      ag::Tape t;
      return loss_of(t, t.constant(prompt)).scalar();
    });
    CHECK(oracle::rel_error(g(r, c), fd) < 1e-4);
  }
  CHECK(enc.checksum() == before);
}

TEST_CASE("frozen encoder contract") {
  DualEncoder enc(EncoderConfig{}, 7);
  CHECK_THROWS_AS(enc.require_frozen("test"), InvariantViolation);
  enc.freeze();
  CHECK_NOTHROW(enc.require_frozen("test"));
  // Binding the encoder without marking it trainable leaves no gradients.
  std::mt19937_64 rng(5);
  ag::Tape tape;
  ag::Var f = enc.encode_image(tape, enc.patch_embed(tape, random_image(rng)));
  CHECK_FALSE(f.requires_grad());
}

TEST_CASE("text encoding") {
  const DualEncoder enc(EncoderConfig{}, 8);
  std::mt19937_64 rng(6);
  const Matrix ctx = oracle::random_matrix(rng, 4, 32);
  ag::Tape tape;
  const Matrix w1 = enc.encode_text(tape, tape.constant(ctx), ClassTag::Live).value();
  const Matrix w2 = enc.encode_text(tape, tape.constant(ctx), ClassTag::Live).value();
  CHECK(w1 == w2);
  CHECK(w1.cols() == 64);
  const Matrix other = enc.encode_text(tape, tape.constant(oracle::random_matrix(rng, 4, 32)), ClassTag::Live).value();
  CHECK((other - w1).norm() > 1e-9);
  CHECK((enc.encode_text(tape, tape.constant(ctx), ClassTag::Fake).value() - w1).norm() > 1e-9);
  CHECK_THROWS_AS(enc.encode_text(tape, tape.constant(Matrix(0, 32)), ClassTag::Live), ShapeError);
  CHECK_THROWS_AS(enc.encode_text(tape, tape.constant(Matrix::Ones(4, 31)), ClassTag::Live), ShapeError);
  CHECK_THROWS_AS(enc.encode_text(tape, tape.constant(Matrix::Ones(40, 32)), ClassTag::Live), ShapeError);
}

TEST_CASE("class probabilities closed forms") {
  Matrix f(1, 2);
  f << 1.0, 0.0;
  Matrix same(2, 2);
  same << 0.3, 0.4, 0.3, 0.4;
  const Matrix p0 = class_probabilities(f, same, 0.07);
  CHECK(p0(0, 0) == doctest::Approx(0.5).epsilon(1e-15));

  Matrix w(2, 2);
  w << 1.0, 0.0, 0.0, 1.0;
  const Matrix p1 = class_probabilities(f, w, 1.0);
  const double e = std::exp(1.0);
  CHECK(std::abs(p1(0, 0) - e / (e + 1.0)) < 1e-15);
  CHECK(std::abs(p1(0, 1) - 1.0 / (e + 1.0)) < 1e-15);
  CHECK(p1(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));

  // cos 0.9 and 0.1 against f = e1.
  Matrix w2(2, 2);
  w2 << 0.9, std::sqrt(1 - 0.81), 0.1, std::sqrt(1 - 0.01);
  CHECK(class_probabilities(f, w2, 0.01)(0, 0) > 1.0 - 1e-10);

  CHECK_THROWS_AS(class_probabilities(Matrix::Zero(1, 2), w, 1.0), NumericalDomainError);
  CHECK_THROWS_AS(class_probabilities(f, w, 0.0), ConfigError);
  CHECK_THROWS_AS(class_probabilities(Matrix::Ones(1, 3), w, 1.0), ShapeError);
}

TEST_CASE("class probabilities sum to one and ignore feature scale") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix f = oracle::random_matrix(rng, 1, 16);
    const Matrix w = oracle::random_matrix(rng, 3, 16);
    const Matrix p = class_probabilities(f, w, 0.07);
    CHECK(std::abs(p.sum() - 1.0) < 1e-6);
    const Matrix q = class_probabilities(f * 7.5, w, 0.07);
    CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("flat-prompt baseline construction") {
  DualEncoder enc(EncoderConfig{}, 10);
  CoopBaseline unified({16, false}, 32, 2, 1);
  CoopBaseline specific({16, true}, 32, 2, 1);
  CHECK(unified.context_token_count() == 16);
  CHECK(specific.context_token_count() == 2 * 16);
  CHECK(unified.parameters().size() == 1);
  CHECK(specific.parameters().size() == 2);
  ag::Tape tape;
  const Matrix wu = unified.text_weights(tape, enc).value();
  CHECK(wu.rows() == 2);
  CHECK((wu.row(0) - wu.row(1)).norm() > 1e-9);
  // With identical class tokens the shared context gives identical weights,
  // so the class token is the only thing separating them.
  Parameter& cls = [&]() -> Parameter& {
    for (Parameter* p : enc.parameters()) {
      if (p->name == "text.class_embed") return *p;
    }
    throw std::runtime_error("missing");
  }();
  cls.value.row(1) = cls.value.row(0);
  ag::Tape t2;
  const Matrix tied = unified.text_weights(t2, enc).value();
  CHECK((tied.row(0) - tied.row(1)).norm() == 0.0);
  const Matrix tied_specific = specific.text_weights(t2, enc).value();
  CHECK((tied_specific.row(0) - tied_specific.row(1)).norm() > 1e-9);
  CHECK_THROWS_AS(CoopBaseline({0, false}, 32, 2, 1), ConfigError);
}

TEST_CASE("flat-prompt baseline training lowers its loss") {
  const AttackTaxonomy t = build_uniform_taxonomy(1);
  GeneratorConfig gc;
  gc.n_identities = 2;
  gc.frames_per_method = 1;
  const Dataset ds = generate_dataset(t, gc);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.images.size(); ++i) idx.push_back(i);
  const TrainingSet data = make_training_set(ds, idx);
  DualEncoder enc(EncoderConfig{}, 11);
  enc.freeze();
  CoopBaseline coop({4, false}, 32, 2, 3);
  BaselineTrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 1e-3;
  cfg.batch_size = static_cast<int>(data.size());  // one full-batch step per epoch
  const LossTrace trace = train_coop(coop, enc, data, cfg, 1);
  const auto ce = trace.series(1, "baseline_ce");
  REQUIRE(ce.size() == 10);
  for (std::size_t k = 1; k < ce.size(); ++k) CHECK(ce[k] <= ce[k - 1] * 1.05);
  CHECK(ce.back() < ce.front());
}
