#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include <unistd.h>

#include "snr/snr_module.hpp"
#include "snr/styleshapes.hpp"

namespace {

namespace fs = std::filesystem;
using namespace snr::data;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("snr_shapes_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

StyleSpec preset(const std::string& name) {
  for (const auto& d : preset_domains())
    if (d.name == name) return d.spec;
  throw std::runtime_error("no preset " + name);
}

double pixel_variance(const DomainDataset& d) {
  const double n = static_cast<double>(d.images.size());
  const double mean = std::accumulate(d.images.begin(), d.images.end(), 0.0) / n;
  double s = 0.0;
  for (float v : d.images) s += (v - mean) * (v - mean);
  return s / n;
}

TEST(RenderShape, SameSeedSameImage) {
  for (std::size_t c = 0; c < kShapeClasses; ++c) {
    const auto a = render_shape(static_cast<ShapeClass>(c), 42);
    const auto b = render_shape(static_cast<ShapeClass>(c), 42);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_NE(a.image, render_shape(static_cast<ShapeClass>(c), 43).image);
  }
}

TEST(RenderShape, MaskNonemptyAndInBoundsOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    for (std::size_t c = 0; c < kShapeClasses; ++c) {
      const auto s = render_shape(static_cast<ShapeClass>(c), seed);
      ASSERT_EQ(s.mask.size(), kImagePixels);
      ASSERT_EQ(s.image.size(), kImageValues);
      std::size_t on = 0;
      for (auto m : s.mask) {
        ASSERT_LE(m, 1u);
        on += m;
      }
      ASSERT_GT(on, 0u) << "class " << c << " seed " << seed;
      ASSERT_LT(on, kImagePixels) << "class " << c << " seed " << seed;
      for (float v : s.image) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
      }
    }
  }
}

TEST(RenderShape, ClassesAreDistinguishableOnAverage) {
  // Mean mask area differs between a disc, a square, a triangle and a cross.
  std::array<double, kShapeClasses> area{};
  for (std::uint64_t seed = 0; seed < 200; ++seed)
    for (std::size_t c = 0; c < kShapeClasses; ++c) {
      const auto s = render_shape(static_cast<ShapeClass>(c), seed);
      area[c] += std::accumulate(s.mask.begin(), s.mask.end(), 0.0) / 200.0;
    }
  for (std::size_t a = 0; a < kShapeClasses; ++a)
    for (std::size_t b = a + 1; b < kShapeClasses; ++b) EXPECT_GT(std::abs(area[a] - area[b]), 5.0);
}

TEST(ApplyStyle, IdentitySpecLeavesImageUnchanged) {
  const auto s = render_shape(ShapeClass::triangle, 7);
  EXPECT_EQ(apply_style(s.image, StyleSpec{}, 1), s.image);
}

TEST(ApplyStyle, ZeroContrastGivesConstantBrightness) {
  StyleSpec spec;
  spec.contrast_scale = 0.0;
  spec.brightness_shift = 0.25;
  for (float v : apply_style(render_shape(ShapeClass::cross, 3).image, spec, 1)) EXPECT_EQ(v, 0.25f);
}

TEST(ApplyStyle, OutputClampedToUnitInterval) {
  StyleSpec spec;
  spec.contrast_scale = 1.6;
  spec.brightness_shift = 0.3;
  spec.noise_std = 0.15;
  spec.channel_mix = {1, 1, 1, 0, 1, 0, 0, 0, 1};
  for (float v : apply_style(render_shape(ShapeClass::square, 5).image, spec, 9)) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(ApplyStyle, RejectsPixelsOutsideUnitInterval) {
  std::vector<float> img(kImageValues, 0.5f);
  img[10] = 1.5f;
  EXPECT_THROW((void)apply_style(img, StyleSpec{}, 0), snr::ContractError);
}

// A per-channel affine restyle (diagonal mix, gamma 1, no noise, no clamping)
// disappears under instance normalization.
TEST(ApplyStyle, InstanceNormRemovesAffineStyle) {
  StyleSpec spec;
  spec.contrast_scale = 0.5;
  spec.brightness_shift = 0.2;
  spec.channel_mix = {0.9, 0, 0, 0, 0.6, 0, 0, 0, 1.0};
  const auto s = render_shape(ShapeClass::circle, 11);
  const auto styled = apply_style(s.image, spec, 0);
  const snr::Shape shape{kImageSide, kImageSide, kImageChannels};
  auto normalized = [&](const std::vector<float>& img) {
    std::vector<double> v(img.begin(), img.end());
    return snr::instance_normalize(snr::Tensor<double>(shape, v), snr::Tensor<double>::full({3}, 1.0),
                                   snr::Tensor<double>::zeros({3}), 0.0);
  };
  const auto a = normalized(s.image), b = normalized(styled);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-5);
}

TEST(StyleSpec, ValidationAndJson) {
  for (const auto& d : preset_domains()) {
    EXPECT_NO_THROW(d.spec.validate()) << d.name;
    EXPECT_EQ(nlohmann::json(d.spec).get<StyleSpec>(), d.spec);
  }
  StyleSpec bad;
  bad.gamma = 3.0;
  EXPECT_THROW(bad.validate(), snr::ConfigError);
  EXPECT_THROW((void)nlohmann::json::parse(R"({"gama": 1.0})").get<StyleSpec>(), snr::ConfigError);
}

TEST(GenerateDomain, BalancedLabels) {
  const auto d = generate_domain("D-id", StyleSpec{}, 400, 4, 1);
  std::array<int, 4> hist{};
  for (auto l : d.labels) ++hist[l];
  for (int h : hist) EXPECT_EQ(h, 100);
  const auto odd = generate_domain("D-id", StyleSpec{}, 402, 4, 1);
  std::array<int, 4> h2{};
  for (auto l : odd.labels) ++h2[l];
  EXPECT_LE(*std::max_element(h2.begin(), h2.end()) - *std::min_element(h2.begin(), h2.end()), 1);
}

TEST(GenerateDomain, DeterministicPerSeed) {
  const auto spec = preset("D-noisy");
  const auto a = generate_domain("D-noisy", spec, 40, 4, 5);
  const auto b = generate_domain("D-noisy", spec, 40, 4, 5);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_NE(a.images, generate_domain("D-noisy", spec, 40, 4, 6).images);
}

TEST(GenerateDomain, DomainsShareContent) {
  const auto a = generate_domain("D-id", preset("D-id"), 20, 4, 3);
  const auto b = generate_domain("D-hue", preset("D-hue"), 20, 4, 3);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, b.images);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto restyled = apply_style(a.image(i), preset("D-hue"), style_seed(3, "D-hue", i));
    EXPECT_TRUE(std::equal(restyled.begin(), restyled.end(), b.image(i).begin()));
  }
}

TEST(GenerateDomain, NoisyDomainHasLargerPixelVariance) {
  const auto id = generate_domain("D-id", preset("D-id"), 200, 4, 0);
  StyleSpec noise_only;
  noise_only.noise_std = 0.12;
  const auto noisy = generate_domain("D-noisy", noise_only, 200, 4, 0);
  EXPECT_GT(pixel_variance(noisy), pixel_variance(id));
}

TEST(GenerateDomain, InvalidClassCount) {
  EXPECT_THROW((void)generate_domain("x", StyleSpec{}, 8, 0, 0), snr::ContractError);
  EXPECT_THROW((void)generate_domain("x", StyleSpec{}, 8, 5, 0), snr::ContractError);
}

TEST(GenerateDomain, BatchLayout) {
  const auto d = generate_domain("D-id", StyleSpec{}, 6, 4, 0);
  const std::vector<std::size_t> idx{4, 1};
  const auto t = d.batch<float>(idx);
  EXPECT_EQ(t.shape(), (snr::Shape{2, 32, 32, 3}));
  EXPECT_EQ(t[0], d.image(4)[0]);
  EXPECT_EQ(t[kImageValues + 17], d.image(1)[17]);
}

TEST(DatasetFiles, RoundTripIsBitwise) {
  const auto dir = temp_dir("roundtrip");
  const auto d = generate_domain("D-dim", preset("D-dim"), 24, 4, 9);
  save_dataset(d, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.name, d.name);
  EXPECT_EQ(back.spec, d.spec);
  EXPECT_EQ(back.seed, d.seed);
  EXPECT_EQ(back.classes, d.classes);
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.masks, d.masks);
  const auto m = read_manifest(dir);
  EXPECT_EQ(m.at("prng"), snr::kPrngName);
  EXPECT_EQ(m.at("checksum").at("images.snrt"), snr::io::sha256_file(dir / "images.snrt"));
  fs::remove_all(dir);
}

TEST(DatasetFiles, TruncatedFileIsCorruption) {
  const auto dir = temp_dir("truncated");
  save_dataset(generate_domain("D-id", StyleSpec{}, 8, 4, 0), dir);
  fs::resize_file(dir / "images.snrt", fs::file_size(dir / "images.snrt") - 7);
  EXPECT_THROW((void)load_dataset(dir), snr::CorruptionError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, FlippedByteIsCorruption) {
  const auto dir = temp_dir("flipped");
  save_dataset(generate_domain("D-id", StyleSpec{}, 8, 4, 0), dir);
  {
    std::fstream f(dir / "labels.snrt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW((void)load_dataset(dir), snr::CorruptionError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, MissingManifestIsFormatError) {
  const auto dir = temp_dir("nomanifest");
  save_dataset(generate_domain("D-id", StyleSpec{}, 4, 4, 0), dir);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW((void)load_dataset(dir), snr::FormatError);
  fs::remove_all(dir);
}

}  // namespace
