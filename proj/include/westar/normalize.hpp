#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "westar/tensor.hpp"

namespace westar {

/// Per-pixel validity, row-major H x W. Nonzero = valid.
using ValidMask = std::vector<std::uint8_t>;

ValidMask all_valid(std::size_t height, std::size_t width);

struct InstanceMask {
  std::uint16_t id = 0;
  std::vector<std::size_t> pixels;  // flat indices, ascending
};

struct InstanceMaskSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<InstanceMask> masks;

  /// Label map with 0 = background, k = instance id.
  std::vector<std::uint16_t> label_map() const;
  static InstanceMaskSet from_label_map(std::size_t height, std::size_t width,
                                        const std::vector<std::uint16_t>& labels);
};

enum class ContextKind { Global, Grid, Bin, Instance };

struct Context {
  std::vector<std::size_t> pixels;  // ascending flat indices
  ContextKind kind = ContextKind::Global;

  bool operator==(const Context&) const = default;
};

/// Context store plus, for every pixel, the ids of the contexts it belongs
/// to. Invalid pixels have an empty list; for valid pixels the first entry
/// is always the global context.
struct ContextHierarchy {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Context> contexts;
  std::vector<std::vector<std::uint32_t>> per_pixel;

  bool operator==(const ContextHierarchy&) const = default;
};

enum class HdnScheme { DepthBins, Grid };

ContextHierarchy build_global_context(std::size_t height, std::size_t width, const ValidMask& valid);

/// Multi-level hierarchy. With DepthBins, level n splits the valid pixels
/// into n equal-count bins by depth; with Grid, into an n x n spatial grid.
/// `levels` must start with 1 (the global context).
ContextHierarchy build_hdn_contexts(const Tensor& depth, const std::vector<std::size_t>& levels,
                                    const ValidMask& valid = {}, HdnScheme scheme = HdnScheme::DepthBins);

/// Global context for every valid pixel, plus the pixel's instance context
/// when that instance has at least `min_size` valid pixels.
ContextHierarchy build_sa_hdn_contexts(const InstanceMaskSet& masks, std::size_t height, std::size_t width,
                                       std::size_t min_size = 16, const ValidMask& valid = {});

struct NormStats {
  Tensor t;  // median
  Tensor s;  // median absolute deviation
  double epsilon = 1e-6;
};

NormStats robust_stats(const Tensor& depth, const Context& context, double epsilon = 1e-6);

/// (d - t) / (s + eps); `depth` may be a scalar or a vector of samples.
Tensor normalize_phi(const Tensor& depth, const NormStats& stats);

}  // namespace westar
