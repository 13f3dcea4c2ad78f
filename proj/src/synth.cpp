#include "westar/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "westar/error.hpp"

namespace westar {

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::MotionBlur: return "motion_blur";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::Fog: return "fog";
    case CorruptionKind::Pixelate: return "pixelate";
  }
  return "unknown";
}

CorruptionKind parse_corruption(const std::string& name) {
  for (auto k : kAllCorruptions)
    if (to_string(k) == name) return k;
  throw Error(ErrorKind::Config, "unknown corruption kind '" + name + "'");
}

double noise_sigma(int s) { return 0.04 * s; }
std::size_t blur_length(int s) { return static_cast<std::size_t>(2 * s + 1); }
double brightness_shift(int s) { return 0.08 * s; }
double contrast_gain(int s) { return std::max(1.0 - 0.15 * s, 0.25); }
double fog_weight(int s) { return 0.12 * s; }
std::size_t pixelate_block(int s) { return std::size_t{1} << ((s + 1) / 2); }

// ------------------------------------------------------------------ scenes

namespace {

struct Vec3 {
  double x, y, z;
};

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v.x / n, v.y / n, v.z / n};
}

struct Box {
  double x0, x1, y0, y1, z;
};

struct Sphere {
  Vec3 c;
  double r;
};

struct Object {
  bool is_box;
  Box box;
  Sphere sphere;
  std::array<double, 3> albedo;
};

}  // namespace

Scene generate_scene(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t n_objects) {
  if (H < 32 || W < 32) throw Error(ErrorKind::Config, "scenes must be at least 32 x 32");
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const double f = 0.9 * static_cast<double>(W);
  const double cx = 0.5 * static_cast<double>(W - 1);
  const double cy = 0.3 * static_cast<double>(H);
  const double cam_h = uni(0.9, 1.3);
  const double wall_z = uni(5.0, 8.0);
  const double wall_tilt = uni(3.0, 6.0);
  const double horizon = -cam_h / wall_z;
  const std::array<double, 3> floor_a{uni(0.5, 0.9), uni(0.4, 0.8), uni(0.3, 0.7)};
  const std::array<double, 3> floor_b{floor_a[0] * 0.6, floor_a[1] * 0.6, floor_a[2] * 0.6};
  const std::array<double, 3> wall_albedo{uni(0.5, 1.0), uni(0.5, 1.0), uni(0.5, 1.0)};

  std::vector<Object> objects;
  for (std::size_t k = 0; k < n_objects; ++k) {
    Object o{};
    o.is_box = uni(0, 1) < 0.5;
    o.albedo = {uni(0.2, 1.0), uni(0.2, 1.0), uni(0.2, 1.0)};
    const double z = uni(2.2, wall_z - 0.8);
    const double xc = uni(-0.4, 0.4) * static_cast<double>(W) / f * z;
    if (o.is_box) {
      const double bw = uni(0.5, 1.3), bh = uni(0.5, 1.8);
      o.box = {xc - bw / 2, xc + bw / 2, -cam_h, -cam_h + bh, z};
    } else {
      const double r = uni(0.3, 0.8);
      o.sphere = {{xc, -cam_h + r, z + r}, r};
    }
    objects.push_back(o);
  }

  std::vector<double> depth(H * W), rgb(H * W * 3);
  std::vector<std::uint16_t> labels(H * W, 0);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double x = (static_cast<double>(c) - cx) / f;
      const double y = (cy - static_cast<double>(r)) / f;
      const Vec3 ray{x, y, 1.0};

      double z;
      Vec3 n;
      std::array<double, 3> albedo;
      if (y < horizon) {
        z = cam_h / -y;
        n = {0, 1, 0};
        const auto cell = static_cast<long>(std::floor(x * z / 0.5)) + static_cast<long>(std::floor(z / 0.5));
        albedo = (cell & 1) ? floor_b : floor_a;
      } else {
        z = wall_z + wall_tilt * (y - horizon);
        n = normalized({0, 0.3, -1});
        albedo = wall_albedo;
      }
      std::uint16_t label = 0;
      for (std::size_t k = 0; k < objects.size(); ++k) {
        const auto& o = objects[k];
        if (o.is_box) {
          const double px = x * o.box.z, py = y * o.box.z;
          if (o.box.z < z && px >= o.box.x0 && px <= o.box.x1 && py >= o.box.y0 && py <= o.box.y1) {
            z = o.box.z;
            n = {0, 0, -1};
            albedo = o.albedo;
            label = static_cast<std::uint16_t>(k + 1);
          }
        } else {
          const auto& s = o.sphere;
          const double a = dot(ray, ray), b = -2 * dot(ray, s.c), cc = dot(s.c, s.c) - s.r * s.r;
          const double disc = b * b - 4 * a * cc;
          if (disc < 0) continue;
          const double t = (-b - std::sqrt(disc)) / (2 * a);
          if (t > 0 && t < z) {
            z = t;
            n = {(t * x - s.c.x) / s.r, (t * y - s.c.y) / s.r, (t - s.c.z) / s.r};
            albedo = o.albedo;
            label = static_cast<std::uint16_t>(k + 1);
          }
        }
      }

      const std::size_t p = r * W + c;
      depth[p] = z;
      labels[p] = label;
      const Vec3 to_cam = normalized({-x * z, -y * z, -z});
      const double diffuse = std::max(0.0, dot(n, to_cam));
      const double dist2 = z * z * dot(ray, ray);
      const double shade = (0.25 + 0.75 * diffuse) / (1.0 + 0.04 * dist2);
      for (int ch = 0; ch < 3; ++ch) rgb[p * 3 + ch] = std::clamp(albedo[ch] * shade * 1.2, 0.0, 1.0);
    }
  }

  Scene scene;
  scene.rgb = Tensor({H, W, 3}, std::move(rgb));
  scene.depth = Tensor({H, W}, std::move(depth));
  scene.masks = InstanceMaskSet::from_label_map(H, W, labels);
  scene.valid = all_valid(H, W);
  return scene;
}

// ------------------------------------------------------------- corruptions

namespace {

void check_rgb(const Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.shape()[2] != 3) {
    throw Error(ErrorKind::Shape, "expected an H x W x 3 image, got " + shape_string(rgb.shape()));
  }
}

Tensor clamped(const Shape& shape, std::vector<double> v) {
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
  return Tensor(shape, std::move(v));
}

}  // namespace

Tensor apply_contrast(const Tensor& rgb, double gain) {
  check_rgb(rgb);
  const auto& v = rgb.values();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain == 1.0 ? v[i] : (v[i] - mean) * gain + mean;
  return clamped(rgb.shape(), std::move(out));
}

Tensor corrupt(const Tensor& rgb, const CorruptionSpec& spec, std::uint64_t seed, const std::optional<Tensor>& depth) {
  check_rgb(rgb);
  if (spec.severity < 0 || spec.severity > 5) {
    throw Error(ErrorKind::Config, "corruption severity must be in 0..5, got " + std::to_string(spec.severity));
  }
  const std::size_t H = rgb.shape()[0], W = rgb.shape()[1];
  const int s = spec.severity;
  std::vector<double> out = rgb.values();
  const auto& v = rgb.values();

  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> noise(0.0, 1.0);
      const double sigma = noise_sigma(s);
      for (double& x : out) x += sigma * noise(rng);
      break;
    }
    case CorruptionKind::MotionBlur: {
      const auto half = static_cast<long>(blur_length(s) / 2);
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            double acc = 0.0;
            for (long k = -half; k <= half; ++k) {
              const long cc = std::clamp(static_cast<long>(c) + k, 0L, static_cast<long>(W) - 1);
              acc += v[(r * W + static_cast<std::size_t>(cc)) * 3 + ch];
            }
            out[(r * W + c) * 3 + ch] = acc / static_cast<double>(2 * half + 1);
          }
      break;
    }
    case CorruptionKind::Brightness:
      for (double& x : out) x += brightness_shift(s);
      break;
    case CorruptionKind::Contrast:
      return apply_contrast(rgb, contrast_gain(s));
    case CorruptionKind::Fog: {
      if (!depth) throw Error(ErrorKind::Data, "fog needs the scene depth");
      if (depth->shape() != Shape{H, W}) throw Error(ErrorKind::Shape, "fog depth does not match the image");
      const auto& d = depth->values();
      const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
      const double range = *hi - *lo;
      for (std::size_t p = 0; p < H * W; ++p) {
        const double w = fog_weight(s) * (range > 0 ? (d[p] - *lo) / range : 0.0);
        for (std::size_t ch = 0; ch < 3; ++ch) out[p * 3 + ch] = v[p * 3 + ch] * (1 - w) + w;
      }
      break;
    }
    case CorruptionKind::Pixelate: {
      const std::size_t b = s == 0 ? 1 : pixelate_block(s);
      for (std::size_t r0 = 0; r0 < H; r0 += b)
        for (std::size_t c0 = 0; c0 < W; c0 += b) {
          const std::size_t r1 = std::min(H, r0 + b), c1 = std::min(W, c0 + b);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            double acc = 0.0;
            for (std::size_t r = r0; r < r1; ++r)
              for (std::size_t c = c0; c < c1; ++c) acc += v[(r * W + c) * 3 + ch];
            acc /= static_cast<double>((r1 - r0) * (c1 - c0));
            for (std::size_t r = r0; r < r1; ++r)
              for (std::size_t c = c0; c < c1; ++c) out[(r * W + c) * 3 + ch] = acc;
          }
        }
      break;
    }
  }
  return clamped(rgb.shape(), std::move(out));
}

// ------------------------------------------------------------ augmentation

AugmentedView apply_geometry(const Tensor& rgb, bool hflip, const CropRect& crop_in) {
  check_rgb(rgb);
  const std::size_t H = rgb.shape()[0], W = rgb.shape()[1];
  CropRect crop = crop_in;
  if (crop.height == 0 || crop.width == 0) crop = {0, 0, H, W};
  if (crop.y + crop.height > H || crop.x + crop.width > W) {
    throw Error(ErrorKind::Config, "crop rectangle leaves the " + std::to_string(H) + " x " + std::to_string(W) +
                                       " frame");
  }
  AugmentedView view;
  view.height = crop.height;
  view.width = crop.width;
  view.source.resize(crop.height * crop.width);
  std::vector<double> out(view.source.size() * 3);
  const auto& v = rgb.values();
  for (std::size_t r = 0; r < crop.height; ++r)
    for (std::size_t c = 0; c < crop.width; ++c) {
      // Flip acts on the full frame, the crop is taken afterwards.
      const std::size_t fc = crop.x + c;
      const std::size_t sc = hflip ? W - 1 - fc : fc;
      const std::size_t src = (crop.y + r) * W + sc;
      view.source[r * crop.width + c] = src;
      for (std::size_t ch = 0; ch < 3; ++ch) out[(r * crop.width + c) * 3 + ch] = v[src * 3 + ch];
    }
  view.image = Tensor({crop.height, crop.width, 3}, std::move(out));
  return view;
}

AugmentedView augment(const Tensor& rgb, const AugmentSpec& spec) {
  AugmentedView view = apply_geometry(rgb, spec.hflip, spec.crop);
  std::mt19937_64 rng(spec.seed);
  const bool strong = spec.strength == Strength::Strong;
  const double amp = strong ? 0.20 : 0.05;
  std::uniform_real_distribution<double> jitter(-amp, amp);
  const double bright = 1.0 + jitter(rng);
  const double contrast = 1.0 + jitter(rng);

  std::vector<double> v = view.image.values();
  for (double& x : v) x *= bright;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (double& x : v) x = (x - mean) * contrast + mean;
  if (strong) {
    std::normal_distribution<double> noise(0.0, 0.05);
    for (double& x : v) x += noise(rng);
    if (std::uniform_real_distribution<double>(0, 1)(rng) < 0.2) {
      std::array<std::size_t, 3> perm{0, 1, 2};
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t p = 0; p < v.size() / 3; ++p) {
        const std::array<double, 3> px{v[p * 3], v[p * 3 + 1], v[p * 3 + 2]};
        for (std::size_t ch = 0; ch < 3; ++ch) v[p * 3 + ch] = px[perm[ch]];
      }
    }
  }
  view.image = clamped(view.image.shape(), std::move(v));
  return view;
}

Tensor warp_map(const Tensor& map, const AugmentedView& view) {
  std::vector<double> out(view.source.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = map[view.source[i]];
  return Tensor({view.height, view.width}, std::move(out));
}

ValidMask warp_valid(const ValidMask& valid, const AugmentedView& view) {
  ValidMask out(view.source.size(), 1);
  if (valid.empty()) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = valid[view.source[i]];
  return out;
}

InstanceMaskSet warp_masks(const InstanceMaskSet& masks, const AugmentedView& view) {
  const auto labels = masks.label_map();
  std::vector<std::uint16_t> out(view.source.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = labels[view.source[i]];
  return InstanceMaskSet::from_label_map(view.height, view.width, out);
}

std::vector<WeakLabel> warp_labels(const std::vector<WeakLabel>& labels, const AugmentedView& view,
                                   std::size_t source_pixels) {
  constexpr auto kMissing = static_cast<std::size_t>(-1);
  std::vector<std::size_t> inverse(source_pixels, kMissing);
  for (std::size_t i = 0; i < view.source.size(); ++i) inverse[view.source[i]] = i;
  std::vector<WeakLabel> out;
  for (const auto& w : labels) {
    if (w.p_plus >= source_pixels || w.p_minus >= source_pixels) {
      throw Error(ErrorKind::Index, "weak label pixel outside the source frame");
    }
    const auto a = inverse[w.p_plus], b = inverse[w.p_minus];
    if (a != kMissing && b != kMissing) out.push_back({a, b, w.l});
  }
  return out;
}

// ------------------------------------------------------------ ordinal pairs

std::vector<WeakLabel> sample_ordinal_pairs(const Tensor& depth_gt, const PairSampling& cfg, std::uint64_t seed,
                                            const ValidMask& valid) {
  if (cfg.k_iters == 0) throw Error(ErrorKind::Config, "k_iters must be at least 1");
  if (cfg.equal_ratio < 1.0) throw Error(ErrorKind::Config, "equal_ratio must be >= 1");
  const auto& d = depth_gt.values();
  std::vector<std::size_t> pixels;
  for (std::size_t p = 0; p < d.size(); ++p)
    if (valid.empty() || valid[p]) pixels.push_back(p);
  if (pixels.empty()) throw Error(ErrorKind::Data, "no valid pixel to sample from");

  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::size_t>& from) {
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
  };

  std::vector<WeakLabel> out;
  std::vector<std::size_t> farther, nearer, equal;
  for (std::size_t it = 0; it < cfg.k_iters; ++it) {
    bool done = false;
    for (std::size_t attempt = 0; attempt <= cfg.anchor_retries && !done; ++attempt) {
      const std::size_t a = pick(pixels);
      farther.clear();
      nearer.clear();
      equal.clear();
      for (auto p : pixels) {
        if (d[p] > d[a] * cfg.equal_ratio) farther.push_back(p);
        else if (d[p] < d[a] / cfg.equal_ratio) nearer.push_back(p);
        else if (p != a) equal.push_back(p);
      }
      const bool eq_ok = cfg.allow_equal && !equal.empty();
      if ((farther.empty() || nearer.empty()) && !eq_ok) continue;
      if (!farther.empty()) out.push_back({pick(farther), a, -1});
      else out.push_back({pick(equal), a, 0});
      if (!nearer.empty()) out.push_back({a, pick(nearer), -1});
      else out.push_back({a, pick(equal), 0});
      done = true;
    }
    if (!done) {
      throw Error(ErrorKind::Data, "could not find an anchor with both farther and nearer pixels after " +
                                       std::to_string(cfg.anchor_retries) + " resamples");
    }
  }
  return out;
}

}  // namespace westar
