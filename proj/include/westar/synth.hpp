#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "westar/losses.hpp"
#include "westar/normalize.hpp"
#include "westar/tensor.hpp"

namespace westar {

/// One procedurally generated view: rgb is H x W x 3 in [0, 1], depth is
/// H x W and positive on valid pixels.
struct Scene {
  Tensor rgb;
  Tensor depth;
  InstanceMaskSet masks;
  ValidMask valid;

  std::size_t height() const { return depth.shape()[0]; }
  std::size_t width() const { return depth.shape()[1]; }
};

enum class CorruptionKind { GaussianNoise, MotionBlur, Brightness, Contrast, Fog, Pixelate };

inline constexpr CorruptionKind kAllCorruptions[] = {
    CorruptionKind::GaussianNoise, CorruptionKind::MotionBlur, CorruptionKind::Brightness,
    CorruptionKind::Contrast,      CorruptionKind::Fog,        CorruptionKind::Pixelate};

std::string to_string(CorruptionKind kind);
CorruptionKind parse_corruption(const std::string& name);

/// Severity 0 is the identity; 1..5 follow the tables below.
struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 5;
};

double noise_sigma(int severity);        // 0.04 s
std::size_t blur_length(int severity);   // 2 s + 1
double brightness_shift(int severity);   // 0.08 s
double contrast_gain(int severity);      // max(1 - 0.15 s, 0.25)
double fog_weight(int severity);         // 0.12 s
std::size_t pixelate_block(int severity);  // 2^ceil(s / 2)

/// Room with a floor and a receding back wall plus `n_objects` boxes and
/// spheres standing on the floor. Deterministic per seed.
Scene generate_scene(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t n_objects);

/// Applies one corruption and clamps to [0, 1]. Fog needs the scene depth.
Tensor corrupt(const Tensor& rgb, const CorruptionSpec& spec, std::uint64_t seed,
               const std::optional<Tensor>& depth = std::nullopt);

Tensor apply_contrast(const Tensor& rgb, double gain);

struct CropRect {
  std::size_t y = 0, x = 0, height = 0, width = 0;  // height == 0: full frame
};

enum class Strength { Weak, Strong };

struct AugmentSpec {
  bool hflip = false;
  CropRect crop;
  Strength strength = Strength::Weak;
  std::uint64_t seed = 0;
};

/// An augmented view and, for each of its pixels, the flat index of the
/// source pixel it was taken from.
struct AugmentedView {
  Tensor image;
  std::vector<std::size_t> source;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Geometry first (hflip, crop), then photometric jitter. Two specs that
/// share hflip and crop produce identical `source` maps.
AugmentedView augment(const Tensor& rgb, const AugmentSpec& spec);

/// Geometry only; the photometric step is skipped.
AugmentedView apply_geometry(const Tensor& rgb, bool hflip, const CropRect& crop);

/// Carry source-frame data into a view's frame.
Tensor warp_map(const Tensor& map, const AugmentedView& view);
ValidMask warp_valid(const ValidMask& valid, const AugmentedView& view);
InstanceMaskSet warp_masks(const InstanceMaskSet& masks, const AugmentedView& view);
/// Labels whose pixels fall outside the view are dropped.
std::vector<WeakLabel> warp_labels(const std::vector<WeakLabel>& labels, const AugmentedView& view,
                                   std::size_t source_pixels);

struct PairSampling {
  std::size_t k_iters = 5;
  double equal_ratio = 1.02;
  bool allow_equal = false;
  std::size_t anchor_retries = 20;
};

/// Anchor-based structured sampling: each iteration emits (farther, anchor)
/// and (anchor, nearer), both with l = -1 (p_plus farther). With
/// allow_equal, an empty side falls back to a pair inside the equal band,
/// labeled l = 0.
std::vector<WeakLabel> sample_ordinal_pairs(const Tensor& depth_gt, const PairSampling& cfg, std::uint64_t seed,
                                            const ValidMask& valid = {});

}  // namespace westar
