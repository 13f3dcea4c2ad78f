#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "westar/dataset.hpp"
#include "westar/train.hpp"

namespace westar {

/// Everything one experiment needs. `seed` drives data, pretraining and the
/// first adaptation run; ablations use seed, seed+1, ... for `n_seeds` runs.
struct ExperimentConfig {
  DatasetConfig data;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  std::uint64_t seed = 0;
  std::size_t n_seeds = 5;
  std::string ablate_axis = "component";  // component | scope | norm
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";
};

/// Flat "key = value" lines, '#' starts a comment. Unknown or repeated keys
/// and unparsable values throw Config. Relative paths are resolved against
/// `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets `seed` and the derived component seeds.
void set_seed(ExperimentConfig& cfg, std::uint64_t seed);

/// Applies WESTAR_SEED when it is set. Throws Config on a malformed value.
void apply_env_overrides(ExperimentConfig& cfg);

/// Canonical text form: every key, sorted, one per line. parse_config of the
/// result reproduces the config.
std::string to_text(const ExperimentConfig& cfg);

/// FNV-1a of to_text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace westar
