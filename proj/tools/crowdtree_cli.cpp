// Command-line driver for the expert-tree crowd counting pipeline.
#include "crowdtree/parallel.hpp"
#include "crowdtree/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <iostream>

using namespace crowdtree;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void fail(const std::string& stage, const std::string& kind, const std::string& message) {
  nlohmann::ordered_json err;
  err["error"] = kind;
  err["stage"] = stage;
  err["message"] = message;
  std::cerr << err.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grows a tree of specialized density regressors for crowd counting and evaluates it."};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config, "JSON config file");
  app.add_option("--out", opt.out, "output directory (overrides the config's \"out\")");
  app.add_option("--seed", opt.seed, "global seed");
  app.add_option("--threads", opt.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  app.add_option("--set", opt.overrides, "config override key=value, e.g. growth.max_tree_depth=1")->take_all();
  app.add_flag("--quiet", opt.quiet, "suppress progress messages");

  std::vector<std::string> stages;
  std::size_t nway_k = 0;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  auto* pre = app.add_subcommand("pretrain", "train the base regressor");
  auto* grw = app.add_subcommand("grow", "grow the expert tree");
  auto* cls = app.add_subcommand("train-classifier", "train the expert classifier for the selected level");
  auto* evl = app.add_subcommand("evaluate", "emit level, method and specialty tables on the test split");
  auto* base = app.add_subcommand("baseline", "train a comparison system");
  base->require_subcommand(1);
  auto* moe = base->add_subcommand("moe", "soft mixture of experts, trained jointly");
  auto* nway = base->add_subcommand("nway", "flat N-way differential training");
  nway->add_option("--k", nway_k, "number of experts")->check(CLI::Range(2, 64));
  auto* ana = app.add_subcommand("analyze", "specialty analysis summary");
  auto* all = app.add_subcommand("all", "run every stage in order");

  CLI11_PARSE(app, argc, argv);

  std::string stage = "config";
  try {
    RunConfig cfg = resolve_config(opt.config, crowdtree_environment(), opt.overrides);
    if (!opt.out.empty()) cfg.out = opt.out;
    if (opt.seed) cfg.seed = *opt.seed;
    if (nway_k) cfg.nway_k = nway_k;
    cfg.validate();
    set_num_threads(opt.threads);

    if (gen->parsed()) stages = {"gen-data"};
    if (pre->parsed()) stages = {"pretrain"};
    if (grw->parsed()) stages = {"grow"};
    if (cls->parsed()) stages = {"train-classifier"};
    if (evl->parsed()) stages = {"evaluate"};
    if (moe->parsed()) stages = {"baseline-moe"};
    if (nway->parsed()) stages = {"baseline-nway"};
    if (ana->parsed()) stages = {"analyze"};
    if (all->parsed()) stages = stage_names();

    const auto start = std::chrono::steady_clock::now();
    const Log log = [&](const std::string& msg) {
      if (opt.quiet) return;
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::fprintf(stderr, "[%8.1fs] %s\n", t, msg.c_str());
    };
    for (const auto& s : stages) {
      stage = s;
      run_stage(s, cfg, log);
    }
  } catch (const std::invalid_argument& e) {
    fail(stage, "invalid_argument", e.what());
    return 2;
  } catch (const std::exception& e) {
    fail(stage, "runtime_error", e.what());
    return 1;
  }
  return 0;
}
