#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "westar/losses.hpp"
#include "westar/normalize.hpp"
#include "westar/synth.hpp"
#include "westar/tensor.hpp"

namespace westar {

/// Binary PPM (P6, maxval 255). Values are quantized on write.
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
Tensor read_ppm(const std::filesystem::path& path);

/// Single-channel PFM ("Pf"), little-endian (scale -1.0), rows stored
/// bottom to top.
void write_pfm(const std::filesystem::path& path, const Tensor& map);
Tensor read_pfm(const std::filesystem::path& path);

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples).
void write_pgm16(const std::filesystem::path& path, std::size_t height, std::size_t width,
                 const std::vector<std::uint16_t>& values);
std::vector<std::uint16_t> read_pgm16(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

/// "WEAK1 H W" header, then one "p_plus p_minus l" line per label.
void write_weak_labels(const std::filesystem::path& path, std::size_t height, std::size_t width,
                       const std::vector<WeakLabel>& labels);
std::vector<WeakLabel> read_weak_labels(const std::filesystem::path& path, std::size_t height, std::size_t width);

/// Scene directory with rgb.ppm, depth.pfm, masks.pgm and, if labels are
/// given, weak.txt.
void write_scene(const std::filesystem::path& dir, const Scene& scene, const std::vector<WeakLabel>* labels);
Scene read_scene(const std::filesystem::path& dir, std::vector<WeakLabel>* labels);

}  // namespace westar
