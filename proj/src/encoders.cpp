#include "hiptune/encoders.hpp"

#include "hiptune/errors.hpp"

#include <cmath>
#include <sstream>

namespace hiptune {

namespace {

Parameter normal_param(const std::string& name, Index rows, Index cols, double std,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std);
  Parameter p{name, Matrix(rows, cols)};
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
  return p;
}

Parameter const_param(const std::string& name, Index rows, Index cols, double v) {
  return Parameter{name, Matrix::Constant(rows, cols, v)};
}

}  // namespace

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("encoder config: " + msg); };
  if (image_size <= 0 || patch_size <= 0) fail("image and patch size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (channels <= 0 || visual_dim <= 0 || text_dim <= 0) fail("dimensions must be positive");
  if (n_layers < 0 || n_heads <= 0 || mlp_ratio <= 0) fail("bad layer/head counts");
  if (visual_dim % n_heads != 0 || text_dim % n_heads != 0) fail("dims must be divisible by n_heads");
  if (max_text_len < 2 || template_len < 1 || template_len + 1 > max_text_len) fail("bad text lengths");
  if (!(temperature > 0.0)) fail("temperature must be > 0");
}

void TokenSequence::validate(Index dim) const {
  if (!tokens.valid()) throw ShapeError("token sequence has no tokens");
  if (n_cls < 0 || n_image < 0 || n_prompt < 0 || tokens.rows() != size()) {
    std::ostringstream os;
    os << "token spans (" << n_cls << "+" << n_image << "+" << n_prompt << ") do not partition "
       << tokens.rows() << " rows";
    throw ShapeError(os.str());
  }
  if (tokens.cols() != dim) {
    std::ostringstream os;
    os << "token dim " << tokens.cols() << " != encoder dim " << dim;
    throw ShapeError(os.str());
  }
}

TransformerBlock::TransformerBlock(const std::string& prefix, int dim, int hidden,
                                   std::mt19937_64& rng)
    : ln1_g(const_param(prefix + ".ln1.g", 1, dim, 1.0)),
      ln1_b(const_param(prefix + ".ln1.b", 1, dim, 0.0)),
      wq(normal_param(prefix + ".attn.wq", dim, dim, 1.0 / std::sqrt(dim), rng)),
      bq(const_param(prefix + ".attn.bq", 1, dim, 0.0)),
      wk(normal_param(prefix + ".attn.wk", dim, dim, 1.0 / std::sqrt(dim), rng)),
      bk(const_param(prefix + ".attn.bk", 1, dim, 0.0)),
      wv(normal_param(prefix + ".attn.wv", dim, dim, 1.0 / std::sqrt(dim), rng)),
      bv(const_param(prefix + ".attn.bv", 1, dim, 0.0)),
      wo(normal_param(prefix + ".attn.wo", dim, dim, 0.5 / std::sqrt(dim), rng)),
      bo(const_param(prefix + ".attn.bo", 1, dim, 0.0)),
      ln2_g(const_param(prefix + ".ln2.g", 1, dim, 1.0)),
      ln2_b(const_param(prefix + ".ln2.b", 1, dim, 0.0)),
      w1(normal_param(prefix + ".mlp.w1", dim, hidden, 1.0 / std::sqrt(dim), rng)),
      b1(const_param(prefix + ".mlp.b1", 1, hidden, 0.0)),
      w2(normal_param(prefix + ".mlp.w2", hidden, dim, 0.5 / std::sqrt(hidden), rng)),
      b2(const_param(prefix + ".mlp.b2", 1, dim, 0.0)) {}

ag::Var TransformerBlock::forward(ag::Tape& tape, const ag::Var& x, int n_heads) const {
  using namespace ag;
  const Index dim = x.cols();
  const Index head = dim / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head));

  Var h = layer_norm(x, tape.param(ln1_g), tape.param(ln1_b));
  Var q = add_row(matmul(h, tape.param(wq)), tape.param(bq));
  Var k = add_row(matmul(h, tape.param(wk)), tape.param(bk));
  Var v = add_row(matmul(h, tape.param(wv)), tape.param(bv));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int i = 0; i < n_heads; ++i) {
    Var qh = slice_cols(q, i * head, head);
    Var kh = slice_cols(k, i * head, head);
    Var vh = slice_cols(v, i * head, head);
    Var att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(att, vh));
  }
  Var attn = add_row(matmul(concat_cols(heads), tape.param(wo)), tape.param(bo));
  Var y = add(x, attn);

  Var m = layer_norm(y, tape.param(ln2_g), tape.param(ln2_b));
  m = gelu(add_row(matmul(m, tape.param(w1)), tape.param(b1)));
  m = add_row(matmul(m, tape.param(w2)), tape.param(b2));
  return add(y, m);
}

void TransformerBlock::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b, &w1,
                       &b1, &w2, &b2}) {
    out.push_back(p);
  }
}

VisionEncoder::VisionEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  std::mt19937_64 rng(seed);
  patch_w_ = normal_param("vision.patch.w", config.patch_dim(), config.visual_dim,
                          1.0 / std::sqrt(config.patch_dim()), rng);
  patch_b_ = const_param("vision.patch.b", 1, config.visual_dim, 0.0);
  cls_ = normal_param("vision.cls", 1, config.visual_dim, 0.02, rng);
  pos_ = normal_param("vision.pos", config.n_image_tokens() + 1, config.visual_dim, 0.02, rng);
  ln_post_g_ = const_param("vision.ln_post.g", 1, config.visual_dim, 1.0);
  ln_post_b_ = const_param("vision.ln_post.b", 1, config.visual_dim, 0.0);
  proj_ = normal_param("vision.proj", config.visual_dim, config.visual_dim,
                       1.0 / std::sqrt(config.visual_dim), rng);
  for (int i = 0; i < config.n_layers; ++i) {
    blocks_.emplace_back("vision.block" + std::to_string(i), config.visual_dim,
                         config.visual_dim * config.mlp_ratio, rng);
  }
}

TokenSequence VisionEncoder::patch_embed(ag::Tape& tape, const Image& image) const {
  const int p = config_.patch_size, g = config_.grid();
  if (image.channels != config_.channels || image.height != config_.image_size ||
      image.width != config_.image_size) {
    std::ostringstream os;
    os << "patch_embed: expected " << config_.channels << "x" << config_.image_size << "x"
       << config_.image_size << " image, got " << image.channels << "x" << image.height << "x"
       << image.width;
    throw ShapeError(os.str());
  }
  Matrix patches(config_.n_image_tokens(), config_.patch_dim());
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const Index row = gy * g + gx;
      Index col = 0;
      for (int c = 0; c < config_.channels; ++c) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) patches(row, col++) = image.at(c, gy * p + py, gx * p + px);
        }
      }
    }
  }
  using namespace ag;
  Var x = add_row(matmul(tape.constant(std::move(patches)), tape.param(patch_w_)), tape.param(patch_b_));
  Var seq = add(concat_rows({tape.param(cls_), x}), tape.param(pos_));
  TokenSequence out;
  out.tokens = seq;
  out.n_cls = 1;
  out.n_image = config_.n_image_tokens();
  out.n_prompt = 0;
  return out;
}

ag::Var VisionEncoder::encode(ag::Tape& tape, const TokenSequence& seq) const {
  seq.validate(config_.visual_dim);
  if (seq.n_cls != 1) throw ShapeError("image encoder expects exactly one class token");
  using namespace ag;
  Var x = seq.tokens;
  for (const auto& b : blocks_) x = b.forward(tape, x, config_.n_heads);
  Var cls = layer_norm(slice_rows(x, 0, 1), tape.param(ln_post_g_), tape.param(ln_post_b_));
  return matmul(cls, tape.param(proj_));
}

void VisionEncoder::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&patch_w_, &patch_b_, &cls_, &pos_}) out.push_back(p);
  for (auto& b : blocks_) b.collect(out);
  for (Parameter* p : {&ln_post_g_, &ln_post_b_, &proj_}) out.push_back(p);
}

TextEncoder::TextEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  std::mt19937_64 rng(seed);
  class_embed_ = normal_param("text.class_embed", 2, config.text_dim, 0.5, rng);
  template_ = normal_param("text.template", config.template_len, config.text_dim, 0.5, rng);
  pos_ = normal_param("text.pos", config.max_text_len, config.text_dim, 0.02, rng);
  ln_final_g_ = const_param("text.ln_final.g", 1, config.text_dim, 1.0);
  ln_final_b_ = const_param("text.ln_final.b", 1, config.text_dim, 0.0);
  proj_ = normal_param("text.proj", config.text_dim, config.visual_dim,
                       1.0 / std::sqrt(config.text_dim), rng);
  for (int i = 0; i < config.n_layers; ++i) {
    blocks_.emplace_back("text.block" + std::to_string(i), config.text_dim,
                         config.text_dim * config.mlp_ratio, rng);
  }
}

ag::Var TextEncoder::encode(ag::Tape& tape, const ag::Var& context, ClassTag tag) const {
  using namespace ag;
  if (context.rows() < 1) throw ShapeError("encode_text: empty context");
  if (context.cols() != config_.text_dim) {
    std::ostringstream os;
    os << "encode_text: context dim " << context.cols() << " != text_dim " << config_.text_dim;
    throw ShapeError(os.str());
  }
  const Index n = context.rows() + 1;
  if (n > config_.max_text_len) {
    throw ShapeError("encode_text: context of " + std::to_string(context.rows()) +
                     " tokens exceeds max_text_len");
  }
  Var cls = slice_rows(tape.param(class_embed_), static_cast<Index>(tag), 1);
  Var x = add(concat_rows({context, cls}), slice_rows(tape.param(pos_), 0, n));
  for (const auto& b : blocks_) x = b.forward(tape, x, config_.n_heads);
  Var last = layer_norm(slice_rows(x, n - 1, 1), tape.param(ln_final_g_), tape.param(ln_final_b_));
  return matmul(last, tape.param(proj_));
}

void TextEncoder::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&class_embed_, &template_, &pos_}) out.push_back(p);
  for (auto& b : blocks_) b.collect(out);
  for (Parameter* p : {&ln_final_g_, &ln_final_b_, &proj_}) out.push_back(p);
}

DualEncoder::DualEncoder(const EncoderConfig& config, std::uint64_t seed)
    : config_(config), vision_(config, seed * 2 + 1), text_(config, seed * 2 + 2) {}

std::vector<Parameter*> DualEncoder::parameters() {
  std::vector<Parameter*> out;
  vision_.collect(out);
  text_.collect(out);
  return out;
}

std::vector<const Parameter*> DualEncoder::parameters() const {
  auto* self = const_cast<DualEncoder*>(this);
  auto mut = self->parameters();
  return {mut.begin(), mut.end()};
}

std::uint64_t DualEncoder::checksum() const { return hiptune::checksum(parameters()); }

void DualEncoder::require_frozen(const char* context) const {
  if (!frozen_) throw InvariantViolation(std::string(context) + ": encoder must be frozen");
}

ag::Var class_probabilities(const ag::Var& feature, const ag::Var& weights, double temperature) {
  using namespace ag;
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (feature.rows() != 1 || feature.cols() != weights.cols()) {
    std::ostringstream os;
    os << "class_probabilities: feature " << feature.rows() << "x" << feature.cols()
       << " vs weights " << weights.rows() << "x" << weights.cols();
    throw ShapeError(os.str());
  }
  Var cos = matmul_nt(normalize_rows(feature), normalize_rows(weights));
  return softmax_rows(scale(cos, 1.0 / temperature));
}

Matrix class_probabilities(const Matrix& feature, const Matrix& weights, double temperature) {
  ag::Tape tape;
  return class_probabilities(tape.constant(feature), tape.constant(weights), temperature).value();
}

void BaselineConfig::validate() const {
  if (context_length < 1) throw ConfigError("baseline context_length must be >= 1");
}

CoopBaseline::CoopBaseline(const BaselineConfig& config, int text_dim, int n_classes,
                           std::uint64_t seed)
    : config_(config), n_classes_(n_classes) {
  config.validate();
  if (n_classes < 2) throw ConfigError("baseline needs at least two classes");
  std::mt19937_64 rng(seed);
  const int n = config.class_specific ? n_classes : 1;
  for (int i = 0; i < n; ++i) {
    contexts_.push_back(
        normal_param("coop.context" + std::to_string(i), config.context_length, text_dim, 0.02, rng));
  }
}

ag::Var CoopBaseline::text_weights(ag::Tape& tape, const DualEncoder& encoder) const {
  std::vector<ag::Var> rows;
  for (int k = 0; k < n_classes_; ++k) {
    const Parameter& ctx = contexts_[config_.class_specific ? static_cast<std::size_t>(k) : 0];
    rows.push_back(encoder.encode_text(tape, tape.param(ctx), static_cast<ClassTag>(k)));
  }
  return ag::concat_rows(rows);
}

ag::Var CoopBaseline::probabilities(ag::Tape& tape, const DualEncoder& encoder,
                                    const ag::Var& feature) const {
  return class_probabilities(feature, text_weights(tape, encoder), encoder.config().temperature);
}

int CoopBaseline::context_token_count() const {
  return static_cast<int>(contexts_.size()) * config_.context_length;
}

std::vector<Parameter*> CoopBaseline::parameters() {
  std::vector<Parameter*> out;
  for (auto& c : contexts_) out.push_back(&c);
  return out;
}

std::vector<const Parameter*> CoopBaseline::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& c : contexts_) out.push_back(&c);
  return out;
}

ag::Var template_weights(ag::Tape& tape, const DualEncoder& encoder) {
  ag::Var ctx = encoder.text().template_context(tape);
  return ag::concat_rows({encoder.encode_text(tape, ctx, ClassTag::Live),
                          encoder.encode_text(tape, ctx, ClassTag::Fake)});
}

}  // namespace hiptune
