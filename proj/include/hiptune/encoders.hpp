#pragma once

// Frozen dual encoder: a ViT-style image encoder that accepts appended
// prompt tokens and a small text transformer fed with vector contexts.
// Both pool their class token. Text outputs are projected into the visual
// feature space so that cosine similarities can be taken directly.

#include "hiptune/autograd.hpp"
#include "hiptune/dataset.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace hiptune {

struct EncoderConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int visual_dim = 64;
  int text_dim = 32;
  int n_layers = 4;
  int n_heads = 4;
  int mlp_ratio = 4;
  int max_text_len = 32;
  int template_len = 4;  // length of the fixed "This is a photo of" context
  double temperature = 0.07;

  void validate() const;
  int grid() const { return image_size / patch_size; }
  int n_image_tokens() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
};

// Tokens are laid out as [cls | image tokens | prompt tokens].
struct TokenSequence {
  ag::Var tokens;
  Index n_cls = 1;
  Index n_image = 0;
  Index n_prompt = 0;

  Index size() const { return n_cls + n_image + n_prompt; }
  ag::Var image_tokens() const { return ag::slice_rows(tokens, n_cls, n_image); }
  // Throws ShapeError if the spans do not partition the token rows.
  void validate(Index dim) const;
};

enum class ClassTag { Live = 0, Fake = 1 };

struct TransformerBlock {
  Parameter ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;

  TransformerBlock(const std::string& prefix, int dim, int hidden, std::mt19937_64& rng);
  ag::Var forward(ag::Tape& tape, const ag::Var& x, int n_heads) const;
  void collect(std::vector<Parameter*>& out);
};

class VisionEncoder {
 public:
  VisionEncoder(const EncoderConfig& config, std::uint64_t seed);

  // Image -> (l + 1) x D tokens with class token and positional embeddings.
  TokenSequence patch_embed(ag::Tape& tape, const Image& image) const;
  // Pooled class-token feature, 1 x D.
  ag::Var encode(ag::Tape& tape, const TokenSequence& seq) const;

  void collect(std::vector<Parameter*>& out);

 private:
  EncoderConfig config_;
  Parameter patch_w_, patch_b_, cls_, pos_;
  std::vector<TransformerBlock> blocks_;
  Parameter ln_post_g_, ln_post_b_, proj_;
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& config, std::uint64_t seed);

  // [context][CLASS] -> class weight vector w, 1 x visual_dim.
  ag::Var encode(ag::Tape& tape, const ag::Var& context, ClassTag tag) const;
  // The fixed template context used by the zero-shot comparator.
  ag::Var template_context(ag::Tape& tape) const { return tape.param(template_); }

  Parameter& template_parameter() { return template_; }
  void collect(std::vector<Parameter*>& out);

 private:
  EncoderConfig config_;
  Parameter class_embed_, template_, pos_;
  std::vector<TransformerBlock> blocks_;
  Parameter ln_final_g_, ln_final_b_, proj_;
};

class DualEncoder {
 public:
  DualEncoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const VisionEncoder& vision() const { return vision_; }
  const TextEncoder& text() const { return text_; }

  TokenSequence patch_embed(ag::Tape& tape, const Image& image) const {
    return vision_.patch_embed(tape, image);
  }
  ag::Var encode_image(ag::Tape& tape, const TokenSequence& seq) const { return vision_.encode(tape, seq); }
  ag::Var encode_text(ag::Tape& tape, const ag::Var& context, ClassTag tag) const {
    return text_.encode(tape, context, tag);
  }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t checksum() const;

  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }
  bool frozen() const { return frozen_; }
  // Throws InvariantViolation unless frozen.
  void require_frozen(const char* context) const;

 private:
  EncoderConfig config_;
  VisionEncoder vision_;
  TextEncoder text_;
  bool frozen_ = false;
};

// softmax_i(cos(w_i, f) / tau) for f (1 x d) and weights (K x d).
ag::Var class_probabilities(const ag::Var& feature, const ag::Var& weights, double temperature);
Matrix class_probabilities(const Matrix& feature, const Matrix& weights, double temperature);

struct BaselineConfig {
  int context_length = 16;
  bool class_specific = false;
  void validate() const;
};

// Learnable text contexts over the frozen text encoder: one shared context
// (unified) or one per class (specific), each context_length x text_dim.
class CoopBaseline {
 public:
  CoopBaseline(const BaselineConfig& config, int text_dim, int n_classes, std::uint64_t seed);

  // K x visual_dim class weights (class order: live, fake).
  ag::Var text_weights(ag::Tape& tape, const DualEncoder& encoder) const;
  ag::Var probabilities(ag::Tape& tape, const DualEncoder& encoder, const ag::Var& feature) const;

  int context_token_count() const;
  const BaselineConfig& config() const { return config_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  BaselineConfig config_;
  int n_classes_;
  std::vector<Parameter> contexts_;
};

// Zero-shot comparator weights from the fixed template, K x visual_dim.
ag::Var template_weights(ag::Tape& tape, const DualEncoder& encoder);

}  // namespace hiptune
