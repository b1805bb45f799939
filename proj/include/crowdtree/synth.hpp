#pragma once

#include "crowdtree/density.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace crowdtree {

struct RegimeSpec {
  std::string name;
  std::size_t count_min = 0;  // heads per patch-sized region
  std::size_t count_max = 0;
  double radius_min = 1.0;    // disc radius, pixels
  double radius_max = 1.0;
  std::uint64_t texture_seed_space = 1024;

  void validate() const;
};

struct SynthConfig {
  std::vector<RegimeSpec> regimes;
  std::size_t scenes_per_regime = 150;
  std::size_t rows = 128;
  std::size_t cols = 128;
  /// Area of the patch-sized region that RegimeSpec counts refer to.
  std::size_t region_rows = 64;
  std::size_t region_cols = 64;
  double sigma = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Head-count range of a whole scene for a regime (count range scaled by area).
  std::array<std::size_t, 2> scene_count_range(const RegimeSpec& r) const;
};

/// The shipped two-regime benchmark: "sparse" and "dense".
std::vector<RegimeSpec> default_regimes();

struct Scene {
  Image image;
  HeadPoints points;
  std::string regime_label;  // analysis only; never seen by trainable code
  DensityMap density;        // derived from points
};

Scene render_scene(const SynthConfig& cfg, std::size_t regime_index, std::size_t scene_index);
/// Scenes ordered regime-major; scene i uses an RNG stream derived from (seed, i).
std::vector<Scene> generate_dataset(const SynthConfig& cfg);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Stratified by regime label. A non-zero fraction that rounds to an empty
/// subset is rejected.
Split split_dataset(const std::vector<Scene>& scenes, std::array<double, 3> fractions, std::uint64_t seed);

/// A training/validation patch with its provenance (scene index, RoI placement).
struct SampledPatch {
  Patch patch;
  std::size_t scene = 0;
  RoiPlacement roi;
};

/// `per_scene` RoIs at uniformly random positions (multiples of 4 pixels) in
/// each listed scene; deterministic in (seed, scene index).
std::vector<SampledPatch> sample_patches(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices,
                                         std::size_t per_scene, const PatchSpec& spec, std::uint64_t seed);

/// Every sliding-window RoI of each listed scene (test-time layout).
std::vector<SampledPatch> sliding_patches(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices,
                                          const PatchSpec& spec);

/// Dataset directory: manifest.json, scenes/scene_NNNN.tge (image), scenes/scene_NNNN.csv (points).
/// Density maps are re-derived from the points with the manifest's sigma.
void save_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, const std::vector<Scene>& scenes,
                  const Split& split);
struct LoadedDataset {
  std::vector<Scene> scenes;
  Split split;
  double sigma = 2.0;
};
LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace crowdtree
