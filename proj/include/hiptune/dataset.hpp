#pragma once

// Procedural stand-in for a face attack corpus. Every identity gets a
// smooth base pattern; attacks add a hierarchical signature (one component
// per taxonomy level, the level-3 component varied per leaf method) tiled
// at the patch period, plus per-frame jitter and pixel noise.

#include "hiptune/manifest.hpp"
#include "hiptune/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hiptune {

// C x H x W, row-major, 32-bit floats.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int c, int y, int x) const {
    return data[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct GeneratorConfig {
  int n_identities = 10;
  int frames_per_method = 3;
  int image_size = 32;
  int patch_size = 4;
  // Per-level signature amplitude against the pixel noise floor; the ratio
  // controls how separable the attack classes are.
  double signal_amplitude = 0.15;
  double noise_std = 0.08;
  // Weight of the per-method variant relative to the level-3 node pattern.
  double variant_spread = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  Manifest manifest;
  std::vector<Image> images;  // parallel to manifest.records
};

// Renders one sample. Pure function of (taxonomy, config, label, frame).
Image render_sample(const AttackTaxonomy& taxonomy, const GeneratorConfig& config,
                    const SampleLabel& label, int frame);

// Records are ordered identity-major; within an identity the live frames
// come first, then each method's frames in method-id order.
Dataset generate_dataset(const AttackTaxonomy& taxonomy, const GeneratorConfig& config);

// Tensor file: "HPTT", u32 version, u32 rank (3), u32 dims, f32 payload,
// all little-endian.
void write_tensor(const std::filesystem::path& path, const Image& image);
Image read_tensor(const std::filesystem::path& path);
// 8-bit binary PPM of the [0,1]-clamped image, for inspection.
void write_ppm(const std::filesystem::path& path, const Image& image);

// Writes dir/manifest.tsv and one tensor per record under dir/samples.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, bool with_ppm = false);
// Loads the manifest and every referenced tensor.
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace hiptune
