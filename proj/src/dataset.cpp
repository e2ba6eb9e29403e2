#include "hiptune/dataset.hpp"

#include "hiptune/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string_view>

namespace hiptune {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix(seed);
  for (auto t : tags) h = splitmix(h ^ t);
  return h;
}

enum : std::uint64_t { kTagIdentity = 1, kTagFrame = 2, kTagNode = 3, kTagMethod = 4, kTagNoise = 5 };

// 3 x P x P pattern, stored channel-major.
using Tile = std::vector<double>;

void normalize_tile(Tile& t, int p) {
  const int plane = p * p;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int i = 0; i < plane; ++i) mean += t[c * plane + i];
    mean /= plane;
    for (int i = 0; i < plane; ++i) t[c * plane + i] -= mean;
  }
  double ss = 0.0;
  for (double v : t) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(t.size()));
  if (rms > 1e-12) {
    for (double& v : t) v /= rms;
  }
}

Tile random_tile(std::uint64_t seed, int p) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tile t(static_cast<std::size_t>(3 * p * p));
  for (double& v : t) v = n(rng);
  normalize_tile(t, p);
  return t;
}

// Attack-flavoured texture for a level-3 node; u, v in [0, 1) across the tile.
Tile flavoured_pattern(std::string_view name, int p) {
  using std::numbers::pi;
  Tile t(static_cast<std::size_t>(3 * p * p), 0.0);
  std::array<double, 3> w{1.0, 1.0, 1.0};
  auto field = [&](auto&& f) {
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) {
        const double u = (y + 0.5) / p, v = (x + 0.5) / p;
        const double val = f(u, v, y, x);
        for (int c = 0; c < 3; ++c) t[(c * p + y) * p + x] = w[c] * val;
      }
    }
  };
  if (name == "print") {  // halftone dots
    w = {1.0, 0.6, 0.2};
    field([&](double u, double v, int, int) { return std::cos(2 * pi * u) * std::cos(2 * pi * v); });
  } else if (name == "replay") {  // screen moire
    w = {0.8, 1.0, 0.8};
    field([&](double u, double v, int, int) { return std::sin(2 * pi * (2 * u + v)); });
  } else if (name == "cutouts") {  // blocky occlusion
    field([&](double u, double v, int, int) { return (u < 0.5 && v < 0.5) ? 1.0 : 0.0; });
  } else if (name == "transparent") {  // specular highlight
    w = {1.0, 1.0, 1.2};
    field([&](double u, double v, int, int) {
      const double d2 = (u - 0.25) * (u - 0.25) + (v - 0.75) * (v - 0.75);
      return std::exp(-d2 / 0.05);
    });
  } else if (name == "plaster") {  // matte, desaturated shading
    field([&](double, double v, int, int) { return std::sin(2 * pi * v); });
  } else if (name == "resin") {  // glossy diagonal shading
    w = {1.0, 0.5, 0.2};
    field([&](double u, double v, int, int) { return u + v; });
  } else if (name == "attribute-edit") {  // local colour edit
    w = {1.0, 0.0, -0.5};
    field([&](double u, double v, int, int) { return (u >= 0.5 && v >= 0.5) ? 1.0 : 0.0; });
  } else if (name == "face-swap") {  // low-frequency blending warp
    w = {0.5, 1.0, 0.5};
    field([&](double u, double, int, int) { return std::sin(2 * pi * u + pi / 3); });
  } else if (name == "video-driven") {  // motion streaks
    field([&](double u, double, int, int) { return std::cos(4 * pi * u); });
  } else if (name == "pixel-level") {  // sign noise
    std::mt19937_64 rng(0x5eed);
    std::bernoulli_distribution b(0.5);
    for (double& val : t) val = b(rng) ? 1.0 : -1.0;
  } else if (name == "semantic-level") {  // chroma ramp
    w = {1.0, -1.0, 0.0};
    field([&](double, double v, int, int) { return v; });
  } else if (name == "ID-consistent") {  // upsampling checkerboard
    field([&](double, double, int y, int x) { return ((y + x) % 2 == 0) ? 1.0 : -1.0; });
  } else if (name == "style-transfer") {  // brush strokes
    w = {0.7, 0.4, 1.0};
    field([&](double u, double v, int, int) { return std::sin(4 * pi * (u - v)); });
  } else if (name == "prompt-based") {  // radial rings
    w = {0.3, 1.0, 0.6};
    field([&](double u, double v, int, int) {
      const double r = std::sqrt((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5));
      return std::cos(4 * pi * r);
    });
  }
  return t;
}

Tile node_tile(const AttackTaxonomy& taxonomy, NodeId node, const GeneratorConfig& cfg) {
  const int p = cfg.patch_size;
  Tile t = random_tile(mix(cfg.seed, {kTagNode, static_cast<std::uint64_t>(node)}), p);
  const TaxonomyNode& n = taxonomy.node(node);
  if (n.level == 3) {
    Tile f = flavoured_pattern(n.name, p);
    normalize_tile(f, p);
    double ss = 0.0;
    for (double v : f) ss += v * v;
    if (ss > 0.0) {
      // Mostly flavour, with a random part that keeps nodes decorrelated.
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = f[i] + 0.5 * t[i];
      normalize_tile(t, p);
    }
  }
  return t;
}

Tile method_tile(const AttackTaxonomy& taxonomy, int method, const GeneratorConfig& cfg) {
  const int p = cfg.patch_size;
  const LeafMethod& m = taxonomy.method(method);
  Tile t = node_tile(taxonomy, m.node, cfg);
  const Tile variant = random_tile(mix(cfg.seed, {kTagMethod, static_cast<std::uint64_t>(method)}), p);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += cfg.variant_spread * variant[i];
  normalize_tile(t, p);
  return t;
}

struct Wave {
  double amp, fy, fx, phase;
  std::array<double, 3> color;
};

}  // namespace

void GeneratorConfig::validate() const {
  if (n_identities < 2) throw ConfigError("n_identities must be >= 2");
  if (frames_per_method < 1) throw ConfigError("frames_per_method must be >= 1");
  if (image_size < 1 || patch_size < 1) throw ConfigError("image and patch size must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (signal_amplitude < 0.0 || noise_std < 0.0 || variant_spread < 0.0) {
    throw ConfigError("generator amplitudes must be non-negative");
  }
}

Image render_sample(const AttackTaxonomy& taxonomy, const GeneratorConfig& cfg,
                    const SampleLabel& label, int frame) {
  using std::numbers::pi;
  label.validate(taxonomy);
  const int s = cfg.image_size, p = cfg.patch_size;
  Image img;
  img.channels = 3;
  img.height = s;
  img.width = s;
  img.data.assign(static_cast<std::size_t>(3 * s * s), 0.0f);

  // Identity base: a few low-frequency waves plus a skin-tone offset.
  std::mt19937_64 id_rng(mix(cfg.seed, {kTagIdentity, static_cast<std::uint64_t>(label.identity)}));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::array<double, 3> offset{};
  for (double& o : offset) o = 0.2 * uni(id_rng) - 0.1;
  std::vector<Wave> waves(3);
  for (Wave& w : waves) {
    w.amp = 0.05 + 0.1 * uni(id_rng);
    w.fy = std::floor(3.0 * uni(id_rng));
    w.fx = std::floor(3.0 * uni(id_rng));
    w.phase = 2 * pi * uni(id_rng);
    for (double& c : w.color) c = 0.5 + 0.5 * uni(id_rng);
  }

  const std::uint64_t record_tag =
      label.is_live ? ~0ull : static_cast<std::uint64_t>(*label.method);
  std::mt19937_64 frame_rng(mix(cfg.seed, {kTagFrame, static_cast<std::uint64_t>(label.identity),
                                           record_tag, static_cast<std::uint64_t>(frame)}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double jitter = 0.3 * gauss(frame_rng);
  const double brightness = 0.02 * gauss(frame_rng);

  Tile sig;
  if (!label.is_live) {
    const Tile t1 = node_tile(taxonomy, label.path->l1, cfg);
    const Tile t2 = node_tile(taxonomy, label.path->l2, cfg);
    const Tile t3 = method_tile(taxonomy, *label.method, cfg);
    sig.resize(t1.size());
    for (std::size_t i = 0; i < sig.size(); ++i) {
      sig[i] = cfg.signal_amplitude * (t1[i] + t2[i] + t3[i]);
    }
  }

  std::mt19937_64 noise_rng(mix(cfg.seed, {kTagNoise, static_cast<std::uint64_t>(label.identity),
                                           record_tag, static_cast<std::uint64_t>(frame)}));
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double v = 0.5 + offset[c] + brightness;
        for (const Wave& w : waves) {
          v += w.amp * w.color[c] *
               std::cos(2 * pi * (w.fy * y + w.fx * x) / s + w.phase + jitter);
        }
        if (!sig.empty()) v += sig[static_cast<std::size_t>((c * p + y % p) * p + x % p)];
        v += cfg.noise_std * gauss(noise_rng);
        img.data[static_cast<std::size_t>((c * s + y) * s + x)] = static_cast<float>(v);
      }
    }
  }
  return img;
}

Dataset generate_dataset(const AttackTaxonomy& taxonomy, const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds;
  const std::vector<int> counts = taxonomy.leaf_counts();
  if (counts != build_taxonomy().leaf_counts()) ds.manifest.leaf_counts = counts;
  const int n_methods = static_cast<int>(taxonomy.method_count());
  std::size_t index = 0;
  auto add = [&](const SampleLabel& label, int frame) {
    std::ostringstream name;
    name << "samples/" << std::setw(6) << std::setfill('0') << index++ << ".tensor";
    ManifestRecord r;
    r.file = name.str();
    r.identity = label.identity;
    r.is_live = label.is_live;
    r.path = label.path;
    r.method = label.method;
    ds.manifest.records.push_back(std::move(r));
    ds.images.push_back(render_sample(taxonomy, cfg, label, frame));
  };
  for (int id = 0; id < cfg.n_identities; ++id) {
    for (int f = 0; f < cfg.frames_per_method; ++f) add(SampleLabel::live(id), f);
    for (int m = 0; m < n_methods; ++m) {
      for (int f = 0; f < cfg.frames_per_method; ++f) add(SampleLabel::fake(taxonomy, id, m), f);
    }
  }
  return ds;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("truncated tensor header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("HPTT", 4);
  put_u32(out, 1);
  put_u32(out, 3);
  put_u32(out, static_cast<std::uint32_t>(image.channels));
  put_u32(out, static_cast<std::uint32_t>(image.height));
  put_u32(out, static_cast<std::uint32_t>(image.width));
  for (float f : image.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Image read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HPTT", 4) != 0) throw IoError(path.string() + ": not a tensor file");
  if (get_u32(in) != 1) throw IoError(path.string() + ": unsupported tensor version");
  if (get_u32(in) != 3) throw IoError(path.string() + ": expected a rank-3 tensor");
  Image img;
  img.channels = static_cast<int>(get_u32(in));
  img.height = static_cast<int>(get_u32(in));
  img.width = static_cast<int>(get_u32(in));
  img.data.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
  for (float& f : img.data) {
    const std::uint32_t bits = get_u32(in);
    std::memcpy(&f, &bits, 4);
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw ShapeError("PPM export needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, bool with_ppm) {
  std::filesystem::create_directories(dir / "samples");
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto file = dir / dataset.manifest.records[i].file;
    write_tensor(file, dataset.images[i]);
    if (with_ppm) {
      auto ppm = file;
      ppm.replace_extension(".ppm");
      write_ppm(ppm, dataset.images[i]);
    }
  }
  save_manifest(dataset.manifest, dir / "manifest.tsv");
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  ds.images.reserve(ds.manifest.records.size());
  for (const auto& r : ds.manifest.records) ds.images.push_back(read_tensor(base / r.file));
  return ds;
}

}  // namespace hiptune
