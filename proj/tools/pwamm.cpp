// pwamm fit|cv|synth|check|bench --config <file> [--out <dir>] [--seed <n>] [--threads <n>]

#include "dcmm/cli.hpp"

#include <CLI11.hpp>

int main(int argc, char** argv) {
  CLI::App app{"Piecewise affine regression by nonmonotone MM with a semismooth Newton inner solver"};
  app.require_subcommand(1, 1);
  std::string config;
  dcmm::cli::Overrides ov;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
  for (const char* name : {"fit", "cv", "synth", "check", "bench"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides config)");
    sub->add_option("--seed", seed, "master seed (overrides config)");
    sub->add_option("--threads", threads, "worker threads (overrides config)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dcmm::cli::kConfigError;
  }
  auto* sub = app.get_subcommands().front();
  if (sub->count("--out")) ov.out = out;
  if (sub->count("--seed")) ov.seed = seed;
  if (sub->count("--threads")) ov.threads = threads;
  return dcmm::cli::run_command(sub->get_name(), config, ov);
}
