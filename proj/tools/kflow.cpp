#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <tuple>

#include "kflow/error.hpp"
#include "kflow/experiment.hpp"

using namespace kflow;

namespace {

struct CommonFlags {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> width;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool many_configs) {
  if (many_configs)
    cmd->add_option("--config", f.configs, "config file (repeat for several)")->required()->check(CLI::ExistingFile);
  else
    cmd->add_option("--config", f.configs, "config file")->expected(0, 1)->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--width-factor", f.width, "CNN channel multiplier");
  cmd->add_option("--override", f.overrides, "section.key=value (repeatable)");
}

exp::ExperimentConfig resolve(const std::string& path, const CommonFlags& f, exp::Kind kind, bool force_kind) {
  exp::ExperimentConfig cfg = path.empty() ? exp::ExperimentConfig{} : exp::load_config(path);
  if (force_kind || path.empty()) cfg.experiment = kind;
  if (cfg.experiment != kind)
    throw Error(ErrorKind::InvalidConfig, path + " describes a " + exp::to_string(cfg.experiment) + " experiment");
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  if (f.width) cfg.network.width_factor = *f.width;
  for (const auto& o : f.overrides) exp::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

int report(const exp::RunRecord& rec) {
  std::printf("out_dir %s\n", rec.out_dir.string().c_str());
  for (const auto& [k, v] : rec.summary) std::printf("%s %.6g\n", k.c_str(), v);
  std::printf("wall_seconds %.1f\n", rec.wall_seconds);
  return rec.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel Flows experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  CommonFlags flags;
  std::vector<std::uint64_t> seeds{0};
  struct Sub {
    exp::Kind kind;
    CLI::App* cmd;
  };
  std::vector<Sub> subs;
  for (auto [name, kind, help] : {std::tuple{"swissroll", exp::Kind::Swissroll, "kernel flow on the two-spiral set"},
                                  std::tuple{"train-cnn", exp::Kind::TrainCnn, "train the CNN with optional KF terms"},
                                  std::tuple{"grad-check", exp::Kind::GradCheck, "finite-difference gradient suite"}}) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, flags, false);
    cmd->add_option("--seed", flags.seed, "master seed");
    subs.push_back({kind, cmd});
  }
  CLI::App* compare = app.add_subcommand("compare", "run several train-cnn configs over several seeds");
  add_common(compare, flags, true);
  compare->add_option("--seed", seeds, "seeds (repeat or comma separated)")->delimiter(',');
  CLI::App* keys = app.add_subcommand("config-keys", "list every config key with its default");

  CLI11_PARSE(app, argc, argv);

  try {
    if (keys->parsed()) {
      for (const auto& [k, doc] : exp::documented_keys()) std::printf("%-26s %s\n", k.c_str(), doc.c_str());
      return 0;
    }
    for (const auto& s : subs) {
      if (!s.cmd->parsed()) continue;
      const std::string path = flags.configs.empty() ? std::string() : flags.configs.front();
      return report(exp::run(resolve(path, flags, s.kind, false)));
    }
    if (compare->parsed()) {
      std::vector<exp::CompareEntry> entries;
      for (const auto& path : flags.configs) {
        CommonFlags per = flags;
        per.out.reset();
        entries.push_back({std::filesystem::path(path).stem().string(), resolve(path, per, exp::Kind::TrainCnn, false)});
      }
      const std::string out = flags.out.value_or("runs/compare");
      const auto rows = exp::compare(entries, seeds, out);
      int status = 0;
      std::printf("%-20s %5s %12s %12s %12s\n", "label", "runs", "mean", "std", "median");
      for (const auto& r : rows) {
        std::printf("%-20s %5zu %12.6f %12.6f %12.6f\n", r.label.c_str(), r.test_errors.size(), r.mean, r.stddev, r.median);
        for (const auto& f : r.failures) {
          std::fprintf(stderr, "%s: %s\n", r.label.c_str(), f.c_str());
          status = 1;
        }
      }
      return status;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
