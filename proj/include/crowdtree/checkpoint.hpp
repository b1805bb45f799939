#pragma once

#include "crowdtree/optim.hpp"

#include <json.hpp>

#include <filesystem>

namespace crowdtree {

/// Writes one tensor archive per entry plus manifest.json. `manifest` is
/// extended with an "entries" list and written with a stable key order.
void save_params(const std::filesystem::path& dir, const ParamSet& params, nlohmann::ordered_json manifest);

struct LoadedParams {
  ParamSet params;
  nlohmann::ordered_json manifest;
};
LoadedParams load_params(const std::filesystem::path& dir);

/// Writes a text file, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace crowdtree
