#include "westar/normalize.hpp"

#include <algorithm>
#include <numeric>

#include "westar/error.hpp"

namespace westar {

ValidMask all_valid(std::size_t height, std::size_t width) { return ValidMask(height * width, 1); }

std::vector<std::uint16_t> InstanceMaskSet::label_map() const {
  std::vector<std::uint16_t> labels(height * width, 0);
  for (const auto& m : masks)
    for (auto p : m.pixels) labels[p] = m.id;
  return labels;
}

InstanceMaskSet InstanceMaskSet::from_label_map(std::size_t height, std::size_t width,
                                                const std::vector<std::uint16_t>& labels) {
  if (labels.size() != height * width) throw Error(ErrorKind::Shape, "label map size mismatch");
  InstanceMaskSet set{height, width, {}};
  std::vector<std::uint16_t> ids;
  for (auto l : labels)
    if (l) ids.push_back(l);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (auto id : ids) {
    InstanceMask m{id, {}};
    for (std::size_t p = 0; p < labels.size(); ++p)
      if (labels[p] == id) m.pixels.push_back(p);
    set.masks.push_back(std::move(m));
  }
  return set;
}

namespace {

ValidMask resolve_valid(const ValidMask& valid, std::size_t n) {
  if (valid.empty()) return ValidMask(n, 1);
  if (valid.size() != n) throw Error(ErrorKind::Shape, "validity mask size does not match the map");
  return valid;
}

std::vector<std::size_t> valid_pixels(const ValidMask& valid) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < valid.size(); ++p)
    if (valid[p]) out.push_back(p);
  return out;
}

}  // namespace

ContextHierarchy build_global_context(std::size_t height, std::size_t width, const ValidMask& valid_in) {
  const ValidMask valid = resolve_valid(valid_in, height * width);
  ContextHierarchy h{height, width, {}, std::vector<std::vector<std::uint32_t>>(height * width)};
  auto pixels = valid_pixels(valid);
  if (pixels.empty()) throw Error(ErrorKind::Data, "validity mask has no valid pixel");
  for (auto p : pixels) h.per_pixel[p] = {0};
  h.contexts.push_back({std::move(pixels), ContextKind::Global});
  return h;
}

ContextHierarchy build_hdn_contexts(const Tensor& depth, const std::vector<std::size_t>& levels,
                                    const ValidMask& valid_in, HdnScheme scheme) {
  if (depth.numel() == 0) throw Error(ErrorKind::Data, "empty depth map");
  if (depth.dim() != 2) throw Error(ErrorKind::Shape, "depth must be H x W, got " + shape_string(depth.shape()));
  if (levels.empty() || levels.front() != 1) throw Error(ErrorKind::Config, "HDN levels must start with 1");
  const std::size_t H = depth.shape()[0], W = depth.shape()[1];
  const ValidMask valid = resolve_valid(valid_in, H * W);
  ContextHierarchy h = build_global_context(H, W, valid);
  const auto pixels = h.contexts[0].pixels;
  const auto& d = depth.values();

  std::vector<std::size_t> by_depth = pixels;
  std::stable_sort(by_depth.begin(), by_depth.end(), [&](auto a, auto b) { return d[a] < d[b]; });

  for (std::size_t li = 1; li < levels.size(); ++li) {
    const std::size_t n = levels[li];
    if (n == 0) throw Error(ErrorKind::Config, "HDN split count must be positive");
    std::vector<std::vector<std::size_t>> groups;
    ContextKind kind;
    if (scheme == HdnScheme::DepthBins) {
      kind = ContextKind::Bin;
      groups.resize(n);
      const std::size_t N = by_depth.size();
      for (std::size_t k = 0; k < N; ++k) groups[k * n / N].push_back(by_depth[k]);
    } else {
      kind = ContextKind::Grid;
      groups.resize(n * n);
      for (auto p : pixels) {
        const std::size_t gy = (p / W) * n / H, gx = (p % W) * n / W;
        groups[gy * n + gx].push_back(p);
      }
    }
    for (auto& g : groups) {
      if (g.empty()) continue;
      std::sort(g.begin(), g.end());
      const auto id = static_cast<std::uint32_t>(h.contexts.size());
      for (auto p : g) h.per_pixel[p].push_back(id);
      h.contexts.push_back({std::move(g), kind});
    }
  }
  return h;
}

ContextHierarchy build_sa_hdn_contexts(const InstanceMaskSet& masks, std::size_t height, std::size_t width,
                                       std::size_t min_size, const ValidMask& valid_in) {
  const ValidMask valid = resolve_valid(valid_in, height * width);
  ContextHierarchy h = build_global_context(height, width, valid);

  std::vector<std::uint16_t> owner(height * width, 0);
  for (const auto& m : masks.masks) {
    for (auto p : m.pixels) {
      if (p >= owner.size()) throw Error(ErrorKind::Index, "instance pixel out of bounds");
      if (owner[p]) {
        throw Error(ErrorKind::Data, "instance masks " + std::to_string(owner[p]) + " and " +
                                         std::to_string(m.id) + " overlap");
      }
      owner[p] = m.id;
    }
  }

  for (const auto& m : masks.masks) {
    std::vector<std::size_t> pixels;
    for (auto p : m.pixels)
      if (valid[p]) pixels.push_back(p);
    std::sort(pixels.begin(), pixels.end());
    if (pixels.empty() || pixels.size() < min_size) continue;
    const auto id = static_cast<std::uint32_t>(h.contexts.size());
    for (auto p : pixels) h.per_pixel[p].push_back(id);
    h.contexts.push_back({std::move(pixels), ContextKind::Instance});
  }
  return h;
}

NormStats robust_stats(const Tensor& depth, const Context& context, double epsilon) {
  if (context.pixels.empty()) throw Error(ErrorKind::Data, "empty normalization context");
  const Tensor samples = gather(depth, context.pixels);
  Tensor t = median(samples);
  Tensor s = median(abs_op(sub(samples, t)));
  return {std::move(t), std::move(s), epsilon};
}

Tensor normalize_phi(const Tensor& depth, const NormStats& stats) {
  if (stats.epsilon < 0.0) throw Error(ErrorKind::Domain, "normalization epsilon must be non-negative");
  return div(sub(depth, stats.t), add(stats.s, Tensor::scalar(stats.epsilon)));
}

}  // namespace westar
