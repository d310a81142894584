#include <gtest/gtest.h>

#include <cmath>

#include "seva/augment.hpp"
#include "seva/microworld.hpp"

using namespace seva;

namespace {

std::vector<ToyImage> sample_images(std::size_t n, std::uint64_t seed = 1) {
  std::vector<ToyImage> out;
  for (const auto& ep : generate_corpus(seed, n, WorldConfig{})) out.push_back(ep.image);
  return out;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(NoiseSchedule, MatchesProductOfLinearBetas) {
  const auto s = NoiseSchedule::linear();
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  double ab = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    ab *= 1.0 - beta;
    ASSERT_NEAR(s.beta(t), beta, 1e-15);
    ASSERT_NEAR(s.alpha_bar(t), ab, 1e-12 * ab + 1e-300);
    if (t > 1) {
      ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
  EXPECT_THROW(s.alpha_bar(1001), Error);
}

TEST(Apply, IdentityIsExact) {
  for (const auto& img : sample_images(10)) EXPECT_EQ(apply(AugmentSpec::identity(), img).pixels, img.pixels);
}

TEST(Apply, ForcedFlipReversesColumnsAndIsAnInvolution) {
  const auto img = sample_images(1)[0];
  const auto once = apply(AugmentSpec::flip(1.0), img);
  const int w = img.pixel_width();
  for (int y = 0; y < img.pixel_height(); ++y)
    for (int x = 0; x < w; ++x) ASSERT_EQ(once.pixel(y, x), img.pixel(y, w - 1 - x));
  EXPECT_EQ(apply(AugmentSpec::flip(1.0), once).pixels, img.pixels);
}

TEST(Apply, DiffusionAtStepZeroIsExact) {
  const auto img = sample_images(1)[0];
  EXPECT_EQ(apply(AugmentSpec::diffusion(0, 5), img).pixels, img.pixels);
  EXPECT_EQ(diffuse(img, 0, 5, NoiseSchedule::linear()).pixels, img.pixels);
}

TEST(Apply, DeterministicForFixedSeed) {
  const auto img = sample_images(1)[0];
  for (auto kind : {AugmentKind::rand_resized_crop, AugmentKind::random_affine, AugmentKind::diffusion_noise, AugmentKind::moco_recipe}) {
    AugmentSpec s{kind, {}, 17};
    EXPECT_EQ(apply(s, img).pixels, apply(s, img).pixels);
  }
}

TEST(Apply, GeometricAugmentationsPreserveShapeAndRange) {
  const auto img = sample_images(1)[0];
  for (auto kind : {AugmentKind::rand_flip, AugmentKind::rand_resized_crop, AugmentKind::random_crop, AugmentKind::center_crop,
                    AugmentKind::random_affine, AugmentKind::random_invert, AugmentKind::moco_recipe})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto out = apply(AugmentSpec{kind, {}, seed}, img);
      ASSERT_EQ(out.pixels.size(), img.pixels.size());
      for (double v : out.pixels) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    }
}

TEST(Apply, DiffusionIsUnclampedWithRecordedRange) {
  const auto out = apply(AugmentSpec::diffusion(800, 3), sample_images(1)[0]);
  ASSERT_TRUE(out.value_range.has_value());
  const auto [lo, hi] = *out.value_range;
  EXPECT_LT(lo, 0.0);
  EXPECT_GT(hi, 1.0);
  const auto back = renormalize(out);
  for (double v : back.pixels) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Apply, Errors) {
  const auto img = sample_images(1)[0];
  AugmentSpec crop{AugmentKind::random_crop, {}, 0};
  crop.params.size = {40, 8};
  EXPECT_THROW(apply(crop, img), Error);
  EXPECT_THROW(apply(AugmentSpec::diffusion(1001), img), Error);
  EXPECT_THROW(diffuse(img, 1001, 0, NoiseSchedule::linear()), Error);
}

TEST(Diffuse, FullNoiseDecorrelatesFromInput) {
  const auto img = sample_images(1)[0];
  const auto sched = NoiseSchedule::linear();
  double mean_corr = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) mean_corr += correlation(diffuse(img, 1000, seed, sched).pixels, img.pixels) / 100.0;
  EXPECT_LT(std::abs(mean_corr), 0.1);
}

// E[x_t] = sqrt(abar_t) x_0 with standard error sqrt(1 - abar_t) / sqrt(n).
TEST(Diffuse, MonteCarloMeanMatchesScaledInput) {
  const auto img = sample_images(1)[0];
  const auto sched = NoiseSchedule::linear();
  const int t = 300, n = 10000;
  const std::vector<std::size_t> probe{0, 37, 101, 250, 511, 600, 777, 1023};
  std::vector<double> acc(probe.size(), 0.0);
  for (int seed = 0; seed < n; ++seed) {
    const auto x = diffuse(img, t, static_cast<std::uint64_t>(seed), sched);
    for (std::size_t k = 0; k < probe.size(); ++k) acc[k] += x.pixels[probe[k]] / n;
  }
  const double ab = sched.alpha_bar(t), se = std::sqrt((1.0 - ab) / n);
  for (std::size_t k = 0; k < probe.size(); ++k) EXPECT_NEAR(acc[k], std::sqrt(ab) * img.pixels[probe[k]], 3.0 * se) << "pixel " << probe[k];
}

TEST(Distortion, IdentityIsZero) { EXPECT_EQ(distortion_strength(AugmentSpec::identity(), sample_images(5)), 0.0); }

TEST(Distortion, StrongerNoiseDistortsMore) {
  const auto sample = sample_images(20);
  double prev = 0.0;
  for (int t : {100, 300, 500, 800, 1000}) {
    double s = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) s += distortion_strength(AugmentSpec::diffusion(t, seed), sample) / 20.0;
    EXPECT_GT(s, prev) << "t=" << t;
    prev = s;
  }
}

TEST(Distortion, FlipIsAnIsometry) {
  const auto img = sample_images(1)[0];
  const auto flipped = apply(AugmentSpec::flip(1.0), img);
  EXPECT_NEAR(distortion_strength(AugmentSpec::flip(1.0), {img}), distortion_strength(AugmentSpec::flip(1.0), {flipped}), 1e-12);
  EXPECT_THROW(distortion_strength(AugmentSpec::identity(), {}), Error);
}

TEST(AugmentSpecJson, RoundTrips) {
  for (auto kind : {AugmentKind::identity, AugmentKind::rand_flip, AugmentKind::diffusion_noise, AugmentKind::moco_recipe}) {
    AugmentSpec s{kind, {}, 42};
    s.params.t = 321;
    const nlohmann::json j = s;
    const auto back = j.get<AugmentSpec>();
    EXPECT_EQ(back.kind, s.kind);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(nlohmann::json(back), j);
  }
  const auto d = nlohmann::json::parse(R"({"kind":"diffusion_noise","params":{"t":500},"seed":3})").get<AugmentSpec>();
  EXPECT_EQ(d.params.t, 500);
  EXPECT_THROW(nlohmann::json::parse(R"({"kind":"autoaug"})").get<AugmentSpec>(), Error);
}
