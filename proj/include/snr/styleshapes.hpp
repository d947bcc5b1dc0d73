#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "snr/error.hpp"
#include "snr/random.hpp"
#include "snr/serialize.hpp"
#include "snr/tensor.hpp"

// StyleShapes: procedurally rendered shapes (content) pushed through
// per-domain appearance transforms (style). Paired images across domains
// share content and differ only in style.

namespace snr::data {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kImageValues = kImagePixels * kImageChannels;

enum class ShapeClass : std::size_t { circle = 0, square = 1, triangle = 2, cross = 3 };
inline constexpr std::size_t kShapeClasses = 4;

struct StyleSpec {
  double brightness_shift = 0.0;
  double contrast_scale = 1.0;
  std::array<double, 9> channel_mix{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3×3
  double gamma = 1.0;
  double noise_std = 0.0;

  friend bool operator==(const StyleSpec&, const StyleSpec&) = default;

  /// Throws ConfigError when a field is outside its documented range.
  void validate() const {
    auto check = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("style spec: ") + what);
    };
    check(brightness_shift >= -0.3 && brightness_shift <= 0.3, "brightness_shift must lie in [-0.3, 0.3]");
    check(contrast_scale >= 0.4 && contrast_scale <= 1.6, "contrast_scale must lie in [0.4, 1.6]");
    check(gamma >= 0.5 && gamma <= 2.0, "gamma must lie in [0.5, 2.0]");
    check(noise_std >= 0.0 && noise_std <= 0.15, "noise_std must lie in [0, 0.15]");
    for (const double m : channel_mix) check(m >= 0.0 && std::isfinite(m), "channel_mix entries must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const StyleSpec& s) {
  j = {{"brightness_shift", s.brightness_shift},
       {"contrast_scale", s.contrast_scale},
       {"channel_mix", s.channel_mix},
       {"gamma", s.gamma},
       {"noise_std", s.noise_std}};
}

inline void from_json(const nlohmann::json& j, StyleSpec& s) {
  static const std::array<const char*, 5> keys{"brightness_shift", "contrast_scale", "channel_mix", "gamma",
                                               "noise_std"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) == keys.end()) {
      throw ConfigError("style spec: unknown key '" + key + "'");
    }
  }
  try {
    s = StyleSpec{};
    if (j.contains("brightness_shift")) j.at("brightness_shift").get_to(s.brightness_shift);
    if (j.contains("contrast_scale")) j.at("contrast_scale").get_to(s.contrast_scale);
    if (j.contains("channel_mix")) j.at("channel_mix").get_to(s.channel_mix);
    if (j.contains("gamma")) j.at("gamma").get_to(s.gamma);
    if (j.contains("noise_std")) j.at("noise_std").get_to(s.noise_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("style spec: ") + e.what());
  }
}

struct NamedStyle {
  std::string name;
  StyleSpec spec;
};

/// The four shipped domains.
inline std::vector<NamedStyle> preset_domains() {
  StyleSpec id;
  StyleSpec dim;
  dim.contrast_scale = 0.5;
  dim.brightness_shift = -0.2;
  StyleSpec hue;
  hue.channel_mix = {0.9, 0.4, 0.0, 0.0, 0.5, 0.2, 0.3, 0.0, 0.6};
  hue.gamma = 1.4;
  StyleSpec noisy;
  noisy.noise_std = 0.12;
  noisy.gamma = 0.7;
  return {{"D-id", id}, {"D-dim", dim}, {"D-hue", hue}, {"D-noisy", noisy}};
}

struct RenderedShape {
  std::vector<float> image;         // [32,32,3] in [0,1]
  std::vector<std::uint8_t> mask;   // [32,32], 1 on shape pixels
};

namespace detail {

// Point membership in shape-local coordinates scaled so the shape fits the
// unit disc.
inline bool inside(ShapeClass cls, double u, double v) {
  switch (cls) {
    case ShapeClass::circle:
      return u * u + v * v <= 1.0;
    case ShapeClass::square:
      return std::abs(u) <= 0.75 && std::abs(v) <= 0.75;
    case ShapeClass::triangle: {
      // Equilateral triangle inscribed in the unit circle, apex up.
      constexpr double s3 = std::numbers::sqrt3;
      return v >= -0.5 && (s3 * u + v) <= 1.0 && (-s3 * u + v) <= 1.0;
    }
    case ShapeClass::cross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
  }
  return false;
}

}  // namespace detail

/// Gray shape on a tinted background with random position (±6 px), extent
/// (0.5–0.9 of the frame) and rotation, 4×4 supersampled.
inline RenderedShape render_shape(ShapeClass cls, std::uint64_t jitter_seed) {
  if (static_cast<std::size_t>(cls) >= kShapeClasses) throw ContractError("render_shape: invalid class id");
  Rng rng(jitter_seed);
  const double half = static_cast<double>(kImageSide) / 2.0;
  const double cx = half + rng.uniform(-6.0, 6.0);
  const double cy = half + rng.uniform(-6.0, 6.0);
  const double radius = rng.uniform(0.5, 0.9) * static_cast<double>(kImageSide) / 2.0;
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double fg = rng.uniform(0.55, 0.95);
  std::array<double, 3> bg{};
  const double bg_level = rng.uniform(0.05, 0.45);
  for (auto& c : bg) c = std::clamp(bg_level + rng.uniform(-0.08, 0.08), 0.0, 1.0);

  const double ct = std::cos(theta), st = std::sin(theta);
  constexpr int kSub = 4;
  RenderedShape out{std::vector<float>(kImageValues), std::vector<std::uint8_t>(kImagePixels)};
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub - cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub - cy;
          // Rotate into the shape frame; v points up.
          const double u = (ct * px + st * py) / radius;
          const double v = (st * px - ct * py) / radius;
          hits += detail::inside(cls, u, v) ? 1 : 0;
        }
      }
      const double coverage = static_cast<double>(hits) / (kSub * kSub);
      const std::size_t p = y * kImageSide + x;
      out.mask[p] = coverage >= 0.5 ? 1 : 0;
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        out.image[p * kImageChannels + c] = static_cast<float>(bg[c] + coverage * (fg - bg[c]));
      }
    }
  }
  return out;
}

/// clamp(((mix·rgb)^gamma)·contrast + brightness + N(0, noise_std)) per
/// pixel, in that order. Noise draws come from `noise_seed` only.
inline std::vector<float> apply_style(std::span<const float> image, const StyleSpec& spec, std::uint64_t noise_seed) {
  if (image.size() % kImageChannels != 0) throw DimensionError("apply_style: image is not RGB");
  Rng rng(noise_seed);
  std::vector<float> out(image.size());
  const auto& m = spec.channel_mix;
  for (std::size_t p = 0; p < image.size(); p += kImageChannels) {
    const double r = image[p], g = image[p + 1], b = image[p + 2];
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      if (!(image[p + c] >= 0.0f && image[p + c] <= 1.0f)) throw ContractError("apply_style: pixel outside [0,1]");
      double v = std::clamp(m[3 * c] * r + m[3 * c + 1] * g + m[3 * c + 2] * b, 0.0, 1.0);
      if (spec.gamma != 1.0) v = std::pow(v, spec.gamma);
      v = v * spec.contrast_scale + spec.brightness_shift;
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
      out[p + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

struct DomainDataset {
  std::string name;
  StyleSpec spec;
  std::uint64_t seed = 0;
  std::size_t classes = kShapeClasses;
  std::vector<float> images;          // [n,32,32,3]
  std::vector<std::size_t> labels;    // [n]
  std::vector<std::uint8_t> masks;    // [n,32,32]

  std::size_t size() const { return labels.size(); }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * kImageValues, kImageValues);
  }

  /// Images at `indices` as an [n,32,32,3] tensor.
  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> indices) const {
    std::vector<T> v;
    v.reserve(indices.size() * kImageValues);
    for (const std::size_t i : indices) {
      const auto img = image(i);
      v.insert(v.end(), img.begin(), img.end());
    }
    return Tensor<T>(Shape{indices.size(), kImageSide, kImageSide, kImageChannels}, std::move(v));
  }
};

inline std::uint64_t content_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(derive_seed(seed, "content"), index);
}

inline std::uint64_t style_seed(std::uint64_t seed, const std::string& domain, std::size_t index) {
  return derive_seed(derive_seed(seed, "style:" + domain), index);
}

/// Image i has label i mod K; its content depends on (seed, i) only, so
/// every domain generated with the same seed shares content.
inline DomainDataset generate_domain(const std::string& name, const StyleSpec& spec, std::size_t n, std::size_t classes,
                                     std::uint64_t seed) {
  if (classes == 0 || classes > kShapeClasses) {
    throw ContractError("generate_domain: classes must be in [1, " + std::to_string(kShapeClasses) + "]");
  }
  DomainDataset d;
  d.name = name;
  d.spec = spec;
  d.seed = seed;
  d.classes = classes;
  d.images.reserve(n * kImageValues);
  d.labels.reserve(n);
  d.masks.reserve(n * kImagePixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    const RenderedShape shape = render_shape(static_cast<ShapeClass>(label), content_seed(seed, i));
    const std::vector<float> styled = apply_style(shape.image, spec, style_seed(seed, name, i));
    d.images.insert(d.images.end(), styled.begin(), styled.end());
    d.labels.push_back(label);
    d.masks.insert(d.masks.end(), shape.mask.begin(), shape.mask.end());
  }
  return d;
}

inline constexpr const char* kDatasetFormat = "styleshapes/1";
inline constexpr std::array<const char*, 3> kDatasetFiles{"images.snrt", "labels.snrt", "masks.snrt"};

/// Writes manifest.json, images.snrt, labels.snrt and masks.snrt into `dir`.
inline void save_dataset(const DomainDataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::size_t n = d.size();
  io::save_tensor<float>(dir / "images.snrt", {n, kImageSide, kImageSide, kImageChannels}, d.images);
  std::vector<float> labels(d.labels.begin(), d.labels.end());
  io::save_tensor<float>(dir / "labels.snrt", {n}, labels);
  std::vector<float> masks(d.masks.begin(), d.masks.end());
  io::save_tensor<float>(dir / "masks.snrt", {n, kImageSide, kImageSide}, masks);

  nlohmann::json checksums;
  for (const char* f : kDatasetFiles) checksums[f] = io::sha256_file(dir / f);
  const nlohmann::json manifest = {{"format", kDatasetFormat},
                                   {"name", d.name},
                                   {"spec", d.spec},
                                   {"seed", d.seed},
                                   {"n", n},
                                   {"classes", d.classes},
                                   {"image_shape", {kImageSide, kImageSide, kImageChannels}},
                                   {"prng", std::string(kPrngName)},
                                   {"checksum", checksums}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw FormatError("dataset " + dir.string() + ": missing manifest.json");
  std::ifstream is(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Loads a dataset directory, verifying every file against the manifest
/// checksums first.
inline DomainDataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  DomainDataset d;
  std::size_t n = 0;
  try {
    if (manifest.at("format") != kDatasetFormat) throw FormatError(dir.string() + ": unsupported dataset format");
    for (const char* f : kDatasetFiles) {
      const auto path = dir / f;
      if (!std::filesystem::exists(path)) throw FormatError(dir.string() + ": missing " + f);
      if (io::sha256_file(path) != manifest.at("checksum").at(f).get<std::string>()) {
        throw CorruptionError(path.string() + ": checksum mismatch");
      }
    }
    d.name = manifest.at("name").get<std::string>();
    d.spec = manifest.at("spec").get<StyleSpec>();
    d.seed = manifest.at("seed").get<std::uint64_t>();
    d.classes = manifest.at("classes").get<std::size_t>();
    n = manifest.at("n").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  auto images = io::read_one(dir / "images.snrt");
  auto labels = io::read_one(dir / "labels.snrt");
  auto masks = io::read_one(dir / "masks.snrt");
  if (images.shape != Shape{n, kImageSide, kImageSide, kImageChannels} || labels.shape != Shape{n} ||
      masks.shape != Shape{n, kImageSide, kImageSide}) {
    throw FormatError(dir.string() + ": tensor shapes disagree with manifest");
  }
  d.images = std::move(images.values);
  d.labels.assign(labels.values.begin(), labels.values.end());
  d.masks.assign(masks.values.begin(), masks.values.end());
  return d;
}

}  // namespace snr::data
