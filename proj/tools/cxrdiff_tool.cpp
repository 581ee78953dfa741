#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cxrdiff/cli.hpp"

int main(int argc, char** argv) {
  using namespace cxrdiff;

  CLI::App app{"Few-shot chest X-ray diffusion toolkit"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  for (const auto& name : cli::commands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "JSON config file")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "override the output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ErrorFamily::config);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  cli::Overrides ov;
  ov.seed = seed;
  if (!out.empty()) ov.out = fs::path(out);
  const auto res = cli::run_file(command, config, ov);
  std::cout << res.summary.dump() << std::endl;
  return res.exit_code;
}
