#pragma once

#include <filesystem>
#include <string>

#include "westar/train.hpp"

namespace westar {

struct DatasetConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_train = 200;
  std::size_t n_adapt = 100;
  std::size_t n_val = 20;
  std::size_t n_test = 100;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  int severity = 5;
  PairSampling pairs;
  std::uint64_t seed = 0;
};

/// Clean scenes named "<name>/0000", ... Each split name draws from its own
/// seed stream, so splits never share a scene.
Split make_clean_split(const std::string& name, std::size_t n, const DatasetConfig& cfg);

/// Corrupted copy of `clean`: sample i gets corruption kind i mod 6 at
/// cfg.severity. Depth and masks are untouched. With `with_labels`, every
/// sample also gets ordinal pairs sampled from its ground truth.
Split corrupt_split(const Split& clean, const std::string& name, const DatasetConfig& cfg, bool with_labels);

/// Kind applied to the i-th sample of a corrupted split.
CorruptionKind corruption_for(std::size_t index);

void write_split(const Split& split, const std::filesystem::path& dir);
/// Reads every scene directory under `dir` in name order.
Split read_split(const std::filesystem::path& dir, const std::string& name);

}  // namespace westar
