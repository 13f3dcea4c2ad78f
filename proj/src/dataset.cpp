#include "westar/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>

#include "westar/error.hpp"
#include "westar/image_io.hpp"
#include "westar/seed.hpp"

namespace westar {

namespace {

std::uint64_t name_tag(const std::string& name) {
  // FNV-1a; std::hash is not stable across implementations.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string sample_id(const std::string& name, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return name + "/" + buf;
}

}  // namespace

CorruptionKind corruption_for(std::size_t index) { return kAllCorruptions[index % std::size(kAllCorruptions)]; }

Split make_clean_split(const std::string& name, std::size_t n, const DatasetConfig& cfg) {
  if (cfg.max_objects < cfg.min_objects) throw Error(ErrorKind::Config, "max_objects < min_objects");
  Split split;
  split.reserve(n);
  const std::uint64_t tag = name_tag(name);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = derive_seed({cfg.seed, tag, i});
    const std::size_t span = cfg.max_objects - cfg.min_objects + 1;
    const std::size_t n_obj = cfg.min_objects + static_cast<std::size_t>(seed % span);
    split.push_back({sample_id(name, i), generate_scene(seed, cfg.height, cfg.width, n_obj), {}});
  }
  return split;
}

Split corrupt_split(const Split& clean, const std::string& name, const DatasetConfig& cfg, bool with_labels) {
  Split out;
  out.reserve(clean.size());
  const std::uint64_t tag = name_tag(name);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    Sample s = clean[i];
    s.id = sample_id(name, i);
    s.scene.rgb = corrupt(s.scene.rgb, {corruption_for(i), cfg.severity}, derive_seed({cfg.seed, tag, i, 1}),
                          s.scene.depth);
    if (with_labels) s.weak = sample_ordinal_pairs(s.scene.depth, cfg.pairs, derive_seed({cfg.seed, tag, i, 2}),
                                                   s.scene.valid);
    out.push_back(std::move(s));
  }
  return out;
}

void write_split(const Split& split, const std::filesystem::path& dir) {
  for (const auto& s : split) {
    const auto leaf = s.id.substr(s.id.find('/') + 1);
    write_scene(dir / leaf, s.scene, s.weak.empty() ? nullptr : &s.weak);
  }
}

Split read_split(const std::filesystem::path& dir, const std::string& name) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::Io, "missing split directory " + dir.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  Split split;
  for (const auto& d : dirs) {
    Sample s;
    s.id = name + "/" + d.filename().string();
    s.scene = read_scene(d, &s.weak);
    split.push_back(std::move(s));
  }
  if (split.empty()) throw Error(ErrorKind::Data, "split directory " + dir.string() + " holds no scenes");
  return split;
}

}  // namespace westar
