// poisonforge: command-line runner for the poisoning lab.
//
//   poisonforge <train-clean|attack|defend|sweep|study|report>
//               [--config PATH] [--seed N] [--out DIR] [--parallel N]
//               [--attack KIND] [--ratio R] [--data DIR]
//
// Flags override the matching config keys. The dataset root comes from
// --data, the config's data_dir, or POISONFORGE_DATA, in that order.
#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "poisonforge/errors.hpp"
#include "poisonforge/experiment.hpp"

namespace pf = poisonforge;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> parallel;
  std::optional<std::string> attack;
  std::optional<double> ratio;
  std::optional<std::string> data;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "root seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--parallel", o.parallel, "concurrent sweep/study cells")->check(CLI::PositiveNumber);
  cmd->add_option("--attack", o.attack, "deep_poison | patch | blend | feature_collision");
  cmd->add_option("--ratio", o.ratio, "poison ratio in [0,1]")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--data", o.data, "MNIST IDX directory (default: $POISONFORGE_DATA)");
}

pf::ExperimentConfig resolve(const Overrides& o) {
  pf::ExperimentConfig c = o.config.empty() ? pf::ExperimentConfig{} : pf::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.parallel) c.parallel = *o.parallel;
  if (o.attack) c.attack.kind = pf::attack_kind_from_string(*o.attack);
  if (o.ratio) c.ratio = *o.ratio;
  if (o.data) c.data_dir = *o.data;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poisonforge: data-poisoning attacks and defenses on MNIST"};
  app.set_version_flag("--version", std::string(pf::kVersion));
  app.require_subcommand(1);

  Overrides o;
  using Command = pf::CommandResult (*)(const pf::ExperimentConfig&);
  const std::pair<const char*, std::pair<const char*, Command>> commands[] = {
      {"train-clean", {"train the reference classifier", &pf::cmd_train_clean}},
      {"attack", {"craft poisons, train the victim, report acc/ASR", &pf::cmd_attack}},
      {"defend", {"scan the poisoned set, filter, retrain, compare", &pf::cmd_defend}},
      {"sweep", {"ASR over poison ratios and seeds", &pf::cmd_sweep}},
      {"study", {"ASR vs inter-class dHash similarity", &pf::cmd_study}},
      {"report", {"sample grids, t-test, perturbation budget", &pf::cmd_report}},
  };
  Command selected = nullptr;
  for (const auto& [name, entry] : commands) {
    CLI::App* cmd = app.add_subcommand(name, entry.first);
    add_common(cmd, o);
    const Command fn = entry.second;
    cmd->callback([&selected, fn] { selected = fn; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    const pf::ExperimentConfig config = resolve(o);
    const pf::CommandResult result = selected(config);
    std::printf("manifest: %s\n", result.manifest.string().c_str());
    return 0;
  } catch (const pf::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
