#pragma once

#include "crowdtree/synth.hpp"

#include <filesystem>
#include <string>

namespace crowdtree::testkit {

/// A handful of 128x128 scenes from both shipped regimes.
inline std::vector<Scene> tiny_scenes(std::size_t per_regime = 2, std::uint64_t seed = 3) {
  SynthConfig cfg;
  cfg.regimes = default_regimes();
  cfg.scenes_per_regime = per_regime;
  cfg.seed = seed;
  return generate_dataset(cfg);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("crowdtree_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace crowdtree::testkit
