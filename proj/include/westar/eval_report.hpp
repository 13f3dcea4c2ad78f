#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "westar/normalize.hpp"
#include "westar/tensor.hpp"

namespace westar {

enum class AlignSpace { Disparity, Depth };

struct Alignment {
  double scale = 1.0;
  double shift = 0.0;
};

struct MetricsReport {
  double delta1 = 0.0;  // percent
  double absrel = 0.0;  // percent
  std::size_t n_pixels = 0;
  std::size_t n_clamped = 0;
  double scale = 1.0;
  double shift = 0.0;

  bool operator==(const MetricsReport&) const = default;
};

/// Least-squares (s, t) minimizing sum_valid (s pred + t - 1/gt)^2. In
/// Depth space the fit is s / pred + t against gt instead.
Alignment align_lsq(const Tensor& pred_disparity, const Tensor& gt_depth, const ValidMask& valid,
                    AlignSpace space = AlignSpace::Disparity);

MetricsReport compute_metrics(const Tensor& pred_disparity, const Tensor& gt_depth, const ValidMask& valid,
                              AlignSpace space = AlignSpace::Disparity);

/// delta1 / AbsRel of an already aligned depth map (alignment fields left
/// at identity).
MetricsReport depth_metrics(const Tensor& aligned_depth, const Tensor& gt_depth, const ValidMask& valid);

/// Mean of per-image delta1 and absrel; pixel and clamp counts are summed,
/// scale/shift are averaged.
MetricsReport average_reports(const std::vector<MetricsReport>& reports);

/// JSON at `path` plus a CSV twin next to it (same stem, .csv).
void emit_report(const std::map<std::string, MetricsReport>& reports, const std::filesystem::path& path);
std::map<std::string, MetricsReport> read_report(const std::filesystem::path& path);

}  // namespace westar
