#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"

int main(int argc, char** argv) {
  using namespace knudsen::cli;
  const std::vector<std::string> args(argv + 1, argv + argc);
  std::string subcommand;
  try {
    const RunConfig config = parse_config(args);
    subcommand = config.subcommand;
    run(config);
    return 0;
  } catch (const HelpRequested& h) {
    std::cout << h.what();
    return h.exit_code();
  } catch (const std::exception& e) {
    std::cerr << error_message(e, subcommand) << '\n';
    return exit_code(e);
  }
}
