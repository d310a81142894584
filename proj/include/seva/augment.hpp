#pragma once

// Raster augmentations used to produce the distorted view of an image,
// including DDPM-style forward diffusion noise.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "seva/microworld.hpp"
#include "seva/rng.hpp"

namespace seva {

class NoiseSchedule {
public:
  // Linear betas from beta_start to beta_end over steps 1..T.
  static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 1) throw Error("noise schedule: T must be >= 1");
    if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0))
      throw Error("noise schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.betas_.resize(static_cast<std::size_t>(T));
    s.alpha_bars_.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bars_[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
      const double beta = beta_start + frac * (beta_end - beta_start);
      s.betas_[static_cast<std::size_t>(t - 1)] = beta;
      s.alpha_bars_[static_cast<std::size_t>(t)] = s.alpha_bars_[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
    }
    return s;
  }

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(static_cast<std::size_t>(t - 1)); }
  // alpha_bar(0) == 1.
  double alpha_bar(int t) const {
    if (t < 0 || t > steps()) throw Error("noise schedule: step " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
    return alpha_bars_[static_cast<std::size_t>(t)];
  }

private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

enum class AugmentKind {
  identity,
  rand_flip,
  rand_resized_crop,
  random_crop,
  center_crop,
  random_affine,
  random_invert,
  diffusion_noise,
  moco_recipe,
};

NLOHMANN_JSON_SERIALIZE_ENUM(AugmentKind, {
                                              {AugmentKind::identity, "identity"},
                                              {AugmentKind::rand_flip, "rand_flip"},
                                              {AugmentKind::rand_resized_crop, "rand_resized_crop"},
                                              {AugmentKind::random_crop, "random_crop"},
                                              {AugmentKind::center_crop, "center_crop"},
                                              {AugmentKind::random_affine, "random_affine"},
                                              {AugmentKind::random_invert, "random_invert"},
                                              {AugmentKind::diffusion_noise, "diffusion_noise"},
                                              {AugmentKind::moco_recipe, "moco_recipe"},
                                          })

struct AugmentParams {
  double p = 0.5;  // flip / invert probability
  bool vertical = false;
  std::array<double, 2> scale{0.25, 1.0};  // crop area fraction
  std::array<double, 2> ratio{3.0 / 4.0, 4.0 / 3.0};
  std::array<int, 2> size{24, 24};  // crop width, height in pixels
  double degrees = 15.0;
  double translate = 0.1;
  std::array<double, 2> affine_scale{0.9, 1.1};
  int t = 800;  // diffusion step
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct AugmentSpec {
  AugmentKind kind = AugmentKind::identity;
  AugmentParams params;
  std::uint64_t seed = 0;

  static AugmentSpec identity() { return {}; }
  static AugmentSpec diffusion(int t, std::uint64_t seed = 0) {
    AugmentSpec s{AugmentKind::diffusion_noise, {}, seed};
    s.params.t = t;
    return s;
  }
  static AugmentSpec flip(double p = 1.0, std::uint64_t seed = 0) {
    AugmentSpec s{AugmentKind::rand_flip, {}, seed};
    s.params.p = p;
    return s;
  }
  // Weak / strong diffusion presets.
  static AugmentSpec diffusion_weak(std::uint64_t seed = 0) { return diffusion(500, seed); }
  static AugmentSpec diffusion_strong(std::uint64_t seed = 0) { return diffusion(800, seed); }

  void validate() const {
    const auto& p = params;
    auto unit = [](double v, const char* what) {
      if (v < 0.0 || v > 1.0) throw Error(std::string("augment: ") + what + " must be in [0,1]");
    };
    switch (kind) {
      case AugmentKind::rand_flip:
      case AugmentKind::random_invert:
        unit(p.p, "p");
        break;
      case AugmentKind::rand_resized_crop:
      case AugmentKind::moco_recipe:
        if (!(0.0 < p.scale[0] && p.scale[0] <= p.scale[1] && p.scale[1] <= 1.0)) throw Error("augment: bad crop scale range");
        if (!(0.0 < p.ratio[0] && p.ratio[0] <= p.ratio[1])) throw Error("augment: bad crop ratio range");
        unit(p.p, "p");
        break;
      case AugmentKind::random_crop:
      case AugmentKind::center_crop:
        if (p.size[0] < 1 || p.size[1] < 1) throw Error("augment: crop size must be positive");
        break;
      case AugmentKind::random_affine:
        if (p.degrees < 0.0 || p.translate < 0.0 || p.translate > 1.0) throw Error("augment: bad affine range");
        if (!(0.0 < p.affine_scale[0] && p.affine_scale[0] <= p.affine_scale[1])) throw Error("augment: bad affine scale");
        break;
      case AugmentKind::diffusion_noise:
        if (p.T < 1) throw Error("augment: diffusion T must be >= 1");
        if (p.t < 0 || p.t > p.T)
          throw Error("augment: diffusion step t=" + std::to_string(p.t) + " outside [0, " + std::to_string(p.T) + "]");
        break;
      case AugmentKind::identity:
        break;
    }
  }

  NoiseSchedule schedule() const { return NoiseSchedule::linear(params.T, params.beta_start, params.beta_end); }
};

inline nlohmann::json to_json_value(const AugmentSpec& s) {
  const auto& p = s.params;
  nlohmann::json params = nlohmann::json::object();
  switch (s.kind) {
    case AugmentKind::rand_flip:
      params = {{"p", p.p}, {"vertical", p.vertical}};
      break;
    case AugmentKind::random_invert:
      params = {{"p", p.p}};
      break;
    case AugmentKind::rand_resized_crop:
      params = {{"scale", p.scale}, {"ratio", p.ratio}};
      break;
    case AugmentKind::moco_recipe:
      params = {{"scale", p.scale}, {"ratio", p.ratio}, {"p", p.p}};
      break;
    case AugmentKind::random_crop:
    case AugmentKind::center_crop:
      params = {{"size", p.size}};
      break;
    case AugmentKind::random_affine:
      params = {{"degrees", p.degrees}, {"translate", p.translate}, {"affine_scale", p.affine_scale}};
      break;
    case AugmentKind::diffusion_noise:
      params = {{"t", p.t}, {"T", p.T}, {"beta_start", p.beta_start}, {"beta_end", p.beta_end}};
      break;
    case AugmentKind::identity:
      break;
  }
  return {{"kind", s.kind}, {"params", std::move(params)}, {"seed", s.seed}};
}

inline void to_json(nlohmann::json& j, const AugmentSpec& s) { j = to_json_value(s); }

inline void from_json(const nlohmann::json& j, AugmentSpec& s) {
  s = AugmentSpec{};
  s.kind = j.at("kind").get<AugmentKind>();
  if (j.contains("kind") && j["kind"].is_string()) {
    // NLOHMANN_JSON_SERIALIZE_ENUM maps unknown strings to the first entry.
    static const char* names[] = {"identity", "rand_flip", "rand_resized_crop", "random_crop", "center_crop",
                                  "random_affine", "random_invert", "diffusion_noise", "moco_recipe"};
    bool known = false;
    for (const char* n : names) known = known || j["kind"] == n;
    if (!known) throw Error("augment: unknown kind " + j["kind"].dump());
  }
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("params")) {
    const auto& p = j["params"];
    auto& q = s.params;
    q.p = p.value("p", q.p);
    q.vertical = p.value("vertical", q.vertical);
    q.scale = p.value("scale", q.scale);
    q.ratio = p.value("ratio", q.ratio);
    q.size = p.value("size", q.size);
    q.degrees = p.value("degrees", q.degrees);
    q.translate = p.value("translate", q.translate);
    q.affine_scale = p.value("affine_scale", q.affine_scale);
    q.t = p.value("t", q.t);
    q.T = p.value("T", q.T);
    q.beta_start = p.value("beta_start", q.beta_start);
    q.beta_end = p.value("beta_end", q.beta_end);
  }
  s.validate();
}

// ---------------------------------------------------------------------------

namespace detail {

// Bilinear sample at continuous pixel-center coordinates; zero outside.
inline double bilinear(const ToyImage& img, double y, double x) {
  const int h = img.pixel_height(), w = img.pixel_width();
  const double fy = std::floor(y), fx = std::floor(x);
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const double wy = y - fy, wx = x - fx;
  auto px = [&](int yy, int xx) { return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : img.pixel(yy, xx); };
  return (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) + wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1));
}

// Resamples the crop box [top, top+ch) x [left, left+cw) to the full raster.
inline void crop_resize(ToyImage& img, double top, double left, double ch, double cw) {
  const int h = img.pixel_height(), w = img.pixel_width();
  std::vector<double> out(img.pixels.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sy = top + (y + 0.5) * ch / h - 0.5;
      const double sx = left + (x + 0.5) * cw / w - 0.5;
      out[static_cast<std::size_t>(y * w + x)] = bilinear(img, std::clamp(sy, 0.0, h - 1.0), std::clamp(sx, 0.0, w - 1.0));
    }
  img.pixels = std::move(out);
}

inline void flip(ToyImage& img, bool vertical) {
  const int h = img.pixel_height(), w = img.pixel_width();
  std::vector<double> out(img.pixels.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y * w + x)] = vertical ? img.pixel(h - 1 - y, x) : img.pixel(y, w - 1 - x);
  img.pixels = std::move(out);
}

inline void resized_crop(ToyImage& img, const AugmentParams& p, Rng& rng) {
  const double h = img.pixel_height(), w = img.pixel_width(), area = h * w;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.scale[0], p.scale[1]);
    const double log_r = rng.uniform(std::log(p.ratio[0]), std::log(p.ratio[1]));
    const double ar = std::exp(log_r);
    const double cw = std::round(std::sqrt(target * ar));
    const double ch = std::round(std::sqrt(target / ar));
    if (cw >= 1 && ch >= 1 && cw <= w && ch <= h) {
      const double top = std::floor(rng.uniform() * (h - ch + 1));
      const double left = std::floor(rng.uniform() * (w - cw + 1));
      crop_resize(img, top, left, ch, cw);
      return;
    }
  }
  // Fallback: whole image (aspect 1 fits every square raster).
}

inline void affine(ToyImage& img, const AugmentParams& p, Rng& rng) {
  const int h = img.pixel_height(), w = img.pixel_width();
  const double angle = rng.uniform(-p.degrees, p.degrees) * std::numbers::pi / 180.0;
  const double tx = rng.uniform(-p.translate, p.translate) * w;
  const double ty = rng.uniform(-p.translate, p.translate) * h;
  const double s = rng.uniform(p.affine_scale[0], p.affine_scale[1]);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<double> out(img.pixels.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Inverse map output -> source.
      const double dx = x - cx - tx, dy = y - cy - ty;
      const double sx = (ca * dx + sa * dy) / s + cx;
      const double sy = (-sa * dx + ca * dy) / s + cy;
      out[static_cast<std::size_t>(y * w + x)] = bilinear(img, sy, sx);
    }
  img.pixels = std::move(out);
}

inline void clamp_unit(ToyImage& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace detail

// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps, eps ~ N(0, 1). Output is
// unclamped; value_range records its (min, max).
inline ToyImage diffuse(const ToyImage& image, int t, std::uint64_t seed, const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.steps())
    throw Error("diffuse: step t=" + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps()) + "]");
  ToyImage out = image;
  const double ab = schedule.alpha_bar(t);
  if (t > 0) {
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Rng rng(seed);
    for (auto& v : out.pixels) v = a * v + b * rng.normal();
  }
  auto [lo, hi] = std::minmax_element(out.pixels.begin(), out.pixels.end());
  out.value_range = std::make_pair(*lo, *hi);
  return out;
}

// Maps an unclamped raster back to [0, 1] using its recorded range.
inline ToyImage renormalize(const ToyImage& image) {
  ToyImage out = image;
  if (!out.value_range) return out;
  const auto [lo, hi] = *out.value_range;
  const double span = hi - lo;
  for (auto& v : out.pixels) v = span > 0.0 ? (v - lo) / span : 0.0;
  out.value_range.reset();
  return out;
}

inline ToyImage apply(const AugmentSpec& spec, const ToyImage& image) {
  spec.validate();
  const auto& p = spec.params;
  ToyImage out = image;
  Rng rng(spec.seed);
  switch (spec.kind) {
    case AugmentKind::identity:
      return out;
    case AugmentKind::rand_flip:
      if (rng.bernoulli(p.p)) detail::flip(out, p.vertical);
      break;
    case AugmentKind::rand_resized_crop:
      detail::resized_crop(out, p, rng);
      break;
    case AugmentKind::random_crop:
    case AugmentKind::center_crop: {
      const int w = out.pixel_width(), h = out.pixel_height();
      if (p.size[0] > w || p.size[1] > h)
        throw Error("augment: crop " + std::to_string(p.size[0]) + "x" + std::to_string(p.size[1]) + " larger than image " +
                    std::to_string(w) + "x" + std::to_string(h));
      double top = (h - p.size[1]) / 2, left = (w - p.size[0]) / 2;
      if (spec.kind == AugmentKind::random_crop) {
        top = static_cast<double>(rng.below(static_cast<std::size_t>(h - p.size[1] + 1)));
        left = static_cast<double>(rng.below(static_cast<std::size_t>(w - p.size[0] + 1)));
      }
      detail::crop_resize(out, top, left, p.size[1], p.size[0]);
      break;
    }
    case AugmentKind::random_affine:
      detail::affine(out, p, rng);
      break;
    case AugmentKind::random_invert:
      if (rng.bernoulli(p.p))
        for (auto& v : out.pixels) v = 1.0 - v;
      break;
    case AugmentKind::diffusion_noise:
      return diffuse(image, p.t, spec.seed, spec.schedule());
    case AugmentKind::moco_recipe:
      detail::resized_crop(out, p, rng);
      if (rng.bernoulli(p.p))
        for (auto& v : out.pixels) v = 1.0 - v;
      if (rng.bernoulli(0.5)) detail::flip(out, false);
      break;
  }
  detail::clamp_unit(out);
  return out;
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Mean ||apply(spec_i, x) - x|| / ||x|| with a per-image seed derived from spec.seed.
inline double distortion_strength(const AugmentSpec& spec, const std::vector<ToyImage>& sample) {
  if (sample.empty()) throw Error("distortion_strength: empty sample");
  double total = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    AugmentSpec s = spec;
    s.seed = derive_seed(spec.seed, {i});
    const auto y = apply(s, sample[i]);
    std::vector<double> diff(y.pixels.size());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = y.pixels[k] - sample[i].pixels[k];
    total += l2_norm(diff) / std::max(l2_norm(sample[i].pixels), 1e-12);
  }
  return total / static_cast<double>(sample.size());
}

}  // namespace seva
