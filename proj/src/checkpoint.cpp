#include "crowdtree/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crowdtree {

void save_params(const std::filesystem::path& dir, const ParamSet& params, nlohmann::ordered_json manifest) {
  std::filesystem::create_directories(dir);
  manifest["entries"] = nlohmann::ordered_json::array();
  for (const auto& [name, entry] : params) {
    save_tensor(dir / (name + ".tge"), entry.value);
    manifest["entries"].push_back(name);
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedParams load_params(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("checkpoint: missing " + (dir / "manifest.json").string());
  LoadedParams out;
  out.manifest = nlohmann::ordered_json::parse(in);
  for (const auto& name : out.manifest.at("entries")) {
    const auto key = name.get<std::string>();
    out.params.add(key, load_tensor(dir / (key + ".tge")));
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace crowdtree
