#include "crowdtree/synth.hpp"

#include "crowdtree/parallel.hpp"
#include "crowdtree/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

namespace {

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

std::string scene_stem(std::size_t i) {
  std::ostringstream os;
  os << "scene_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

struct Wave {
  double fx, fy, phase, amp;
};

}  // namespace

void RegimeSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("regime: empty name");
  if (count_min > count_max) throw std::invalid_argument("regime '" + name + "': count min > max");
  if (radius_min < 1.0 || radius_min > radius_max) {
    throw std::invalid_argument("regime '" + name + "': radius range must satisfy 1 <= min <= max");
  }
  if (texture_seed_space == 0) throw std::invalid_argument("regime '" + name + "': empty texture seed space");
}

void SynthConfig::validate() const {
  if (regimes.empty()) throw std::invalid_argument("synth: no regimes");
  std::set<std::string> names;
  for (const auto& r : regimes) {
    r.validate();
    if (!names.insert(r.name).second) throw std::invalid_argument("synth: duplicate regime name '" + r.name + "'");
  }
  if (scenes_per_regime == 0) throw std::invalid_argument("synth: scenes_per_regime must be > 0");
  if (rows == 0 || cols == 0 || region_rows == 0 || region_cols == 0) throw std::invalid_argument("synth: zero extent");
  if (!(sigma > 0.0)) throw std::invalid_argument("synth: sigma must be > 0");
}

std::array<std::size_t, 2> SynthConfig::scene_count_range(const RegimeSpec& r) const {
  const double scale = static_cast<double>(rows * cols) / static_cast<double>(region_rows * region_cols);
  return {static_cast<std::size_t>(std::llround(static_cast<double>(r.count_min) * scale)),
          static_cast<std::size_t>(std::llround(static_cast<double>(r.count_max) * scale))};
}

std::vector<RegimeSpec> default_regimes() {
  return {
      {"sparse", 2, 10, 5.0, 7.0, 1024},
      {"dense", 60, 120, 1.0, 2.0, 1024},
  };
}

Scene render_scene(const SynthConfig& cfg, std::size_t regime_index, std::size_t scene_index) {
  const RegimeSpec& regime = cfg.regimes.at(regime_index);
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(scene_index)));
  const auto rows = static_cast<Eigen::Index>(cfg.rows);
  const auto cols = static_cast<Eigen::Index>(cfg.cols);

  // Background: base level + low-frequency texture + pixel noise.
  const double base = rng.uniform(0.15, 0.35);
  const auto texture_seed = static_cast<std::uint64_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(regime.texture_seed_space) - 1));
  Rng texture_rng(derive_seed(derive_seed(cfg.seed, "texture"), texture_seed));
  std::array<Wave, 3> waves{};
  for (auto& w : waves) {
    w = {texture_rng.uniform(-0.08, 0.08), texture_rng.uniform(-0.08, 0.08),
         texture_rng.uniform(0.0, 2.0 * std::numbers::pi), texture_rng.uniform(0.01, 0.04)};
  }
  Image image(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      double v = base;
      for (const auto& w : waves) {
        v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * static_cast<double>(c) + w.fy * static_cast<double>(r)) + w.phase);
      }
      image(r, c) = v + 0.02 * rng.normal();
    }
  }

  const auto [lo, hi] = cfg.scene_count_range(regime);
  const auto count = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
  HeadPoints points;
  points.reserve(count);
  constexpr int kSuper = 4;
  for (std::size_t i = 0; i < count; ++i) {
    const HeadPoint p{round3(rng.uniform(0.0, static_cast<double>(cfg.cols))),
                      round3(rng.uniform(0.0, static_cast<double>(cfg.rows)))};
    const double radius = rng.uniform(regime.radius_min, regime.radius_max);
    const double intensity = rng.uniform(0.55, 0.85);
    points.push_back(p);
    // Anti-aliased disc centred exactly on the annotation.
    const auto r0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(p.y - radius)));
    const auto r1 = std::min<Eigen::Index>(rows - 1, static_cast<Eigen::Index>(std::ceil(p.y + radius)));
    const auto c0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(p.x - radius)));
    const auto c1 = std::min<Eigen::Index>(cols - 1, static_cast<Eigen::Index>(std::ceil(p.x + radius)));
    for (Eigen::Index r = r0; r <= r1; ++r) {
      for (Eigen::Index c = c0; c <= c1; ++c) {
        int inside = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double dy = static_cast<double>(r) + (sy + 0.5) / kSuper - p.y;
            const double dx = static_cast<double>(c) + (sx + 0.5) / kSuper - p.x;
            inside += (dx * dx + dy * dy <= radius * radius) ? 1 : 0;
          }
        }
        const double cover = inside / static_cast<double>(kSuper * kSuper);
        image(r, c) = image(r, c) * (1.0 - cover) + intensity * cover;
      }
    }
  }
  image = image.cwiseMax(0.0).cwiseMin(1.0);

  Scene scene;
  scene.density = make_density_map(points, cfg.rows, cfg.cols, cfg.sigma);
  scene.image = std::move(image);
  scene.points = std::move(points);
  scene.regime_label = regime.name;
  return scene;
}

std::vector<Scene> generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t total = cfg.regimes.size() * cfg.scenes_per_regime;
  std::vector<Scene> scenes(total);
  parallel_for(total, [&](std::size_t i) { scenes[i] = render_scene(cfg, i / cfg.scenes_per_regime, i); });
  return scenes;
}

Split split_dataset(const std::vector<Scene>& scenes, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split: negative fraction");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split: fractions must sum to 1");
  }
  std::map<std::string, std::vector<std::size_t>> by_regime;
  for (std::size_t i = 0; i < scenes.size(); ++i) by_regime[scenes[i].regime_label].push_back(i);

  Split split;
  for (auto& [label, members] : by_regime) {
    Rng rng(derive_seed(seed, label));
    rng.shuffle(members);
    const auto n = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(members.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    for (std::size_t k = 0; k < members.size(); ++k) {
      auto& dst = k < n_train ? split.train : (k < n_train + n_val ? split.val : split.test);
      dst.push_back(members[k]);
    }
  }
  const std::array<const std::vector<std::size_t>*, 3> parts = {&split.train, &split.val, &split.test};
  const std::array<const char*, 3> names = {"train", "val", "test"};
  for (std::size_t k = 0; k < 3; ++k) {
    if (fractions[k] > 0.0 && parts[k]->empty()) {
      throw std::invalid_argument(std::string("split: ") + names[k] + " subset is empty");
    }
  }
  for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

std::vector<SampledPatch> sample_patches(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices,
                                         std::size_t per_scene, const PatchSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<SampledPatch> out;
  out.reserve(indices.size() * per_scene);
  for (std::size_t idx : indices) {
    const Scene& scene = scenes.at(idx);
    const auto rows = static_cast<std::size_t>(scene.image.rows());
    const auto cols = static_cast<std::size_t>(scene.image.cols());
    if (rows < spec.roi_h || cols < spec.roi_w) throw std::invalid_argument("sample_patches: image smaller than roi");
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(idx)));
    for (std::size_t k = 0; k < per_scene; ++k) {
      const auto max_top = static_cast<std::int64_t>((rows - spec.roi_h) / kDownscale);
      const auto max_left = static_cast<std::int64_t>((cols - spec.roi_w) / kDownscale);
      const RoiPlacement roi{static_cast<std::size_t>(rng.uniform_int(0, max_top)) * kDownscale,
                             static_cast<std::size_t>(rng.uniform_int(0, max_left)) * kDownscale};
      out.push_back({extract_patch(scene.image, scene.density, roi, spec), idx, roi});
    }
  }
  return out;
}

std::vector<SampledPatch> sliding_patches(const std::vector<Scene>& scenes, const std::vector<std::size_t>& indices,
                                          const PatchSpec& spec) {
  spec.validate();
  std::vector<SampledPatch> out;
  for (std::size_t idx : indices) {
    const Scene& scene = scenes.at(idx);
    for (const RoiPlacement& roi : slide_rois(static_cast<std::size_t>(scene.image.rows()),
                                              static_cast<std::size_t>(scene.image.cols()), spec)) {
      out.push_back({extract_patch(scene.image, scene.density, roi, spec), idx, roi});
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, const std::vector<Scene>& scenes,
                  const Split& split) {
  std::filesystem::create_directories(dir / "scenes");
  nlohmann::ordered_json manifest;
  manifest["format"] = "crowdtree-dataset-1";
  manifest["seed"] = cfg.seed;
  manifest["rows"] = cfg.rows;
  manifest["cols"] = cfg.cols;
  manifest["sigma"] = cfg.sigma;
  manifest["regimes"] = nlohmann::ordered_json::array();
  for (const auto& r : cfg.regimes) {
    manifest["regimes"].push_back({{"name", r.name},
                                   {"count_range", {r.count_min, r.count_max}},
                                   {"dot_radius_range", {r.radius_min, r.radius_max}},
                                   {"texture_seed_space", r.texture_seed_space}});
  }
  manifest["scenes"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string stem = scene_stem(i);
    save_tensor(dir / "scenes" / (stem + ".tge"), grid_to_tensor(scenes[i].image));
    save_points_csv(dir / "scenes" / (stem + ".csv"), scenes[i].points);
    manifest["scenes"].push_back({{"id", stem}, {"regime", scenes[i].regime_label}});
  }
  manifest["splits"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("dataset: missing " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(in);
  LoadedDataset data;
  data.sigma = manifest.at("sigma").get<double>();
  for (const auto& entry : manifest.at("scenes")) {
    const std::string stem = entry.at("id").get<std::string>();
    Scene scene;
    scene.image = tensor_to_grid(load_tensor(dir / "scenes" / (stem + ".tge")));
    scene.points = load_points_csv(dir / "scenes" / (stem + ".csv"));
    scene.regime_label = entry.value("regime", std::string{});
    scene.density = make_density_map(scene.points, static_cast<std::size_t>(scene.image.rows()),
                                     static_cast<std::size_t>(scene.image.cols()), data.sigma);
    data.scenes.push_back(std::move(scene));
  }
  const auto& splits = manifest.at("splits");
  data.split.train = splits.at("train").get<std::vector<std::size_t>>();
  data.split.val = splits.at("val").get<std::vector<std::size_t>>();
  data.split.test = splits.at("test").get<std::vector<std::size_t>>();
  return data;
}

}  // namespace crowdtree
