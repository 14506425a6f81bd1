// Command-line front end: `loop estimate|simulate|oracle [flags]`.
// Flags mirror the config fields; --config loads a JSON document with the
// same field names, and flags given on the command line override it.

#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "loop/cli.hpp"

namespace cli = loop::cli;

int main(int argc, char** argv) {
  CLI::App app{"LOOP average treatment effect estimator"};
  app.require_subcommand(1);

  struct Command {
    CLI::App* app = nullptr;
    std::string config;
    std::map<std::string, std::string> scalar;
    std::map<std::string, std::vector<std::string>> list;
    std::map<std::string, bool> flag;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Command> commands;
  const std::pair<const char*, const char*> names[] = {
      {"estimate", "estimate the average treatment effect from a CSV file"},
      {"simulate", "run the simulation studies"},
      {"oracle", "enumerate every assignment of a small potential-outcome table"}};
  for (const auto& [name, help] : names) {
    auto& cmd = commands[name];
    cmd.app = app.add_subcommand(name, help);
    cmd.app->add_option("--config", cmd.config, "JSON config file with the same field names");
    const unsigned mask = std::string(name) == "estimate" ? cli::Estimate
                          : std::string(name) == "simulate" ? cli::Simulate
                                                            : cli::Oracle;
    for (const auto& f : cli::config_fields()) {
      if (!(f.commands & mask)) continue;
      const std::string flag = "--" + f.name;
      CLI::Option* opt = nullptr;
      switch (f.type) {
        case cli::FieldType::Bool:
          opt = cmd.app->add_flag(flag + ",!--no-" + f.name, cmd.flag[f.name], f.help);
          break;
        case cli::FieldType::StringList:
        case cli::FieldType::NumberList:
          opt = cmd.app->add_option(flag, cmd.list[f.name], f.help)->delimiter(',');
          break;
        default:
          opt = cmd.app->add_option(flag, cmd.scalar[f.name], f.help);
      }
      cmd.options[f.name] = opt;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << cli::error_json("InvalidConfig", e.what(), 2);
    return 2;
  }

  for (auto& [name, cmd] : commands) {
    if (!cmd.app->parsed()) continue;
    cli::RunConfig cfg;
    try {
      cli::json doc = cmd.config.empty() ? cli::json::object() : cli::load_config_file(cmd.config);
      for (const auto& [field, opt] : cmd.options) {
        if (opt->count() == 0) continue;
        if (cmd.flag.count(field)) {
          doc[field] = cmd.flag[field];
        } else if (cmd.list.count(field)) {
          doc[field] = cli::coerce_flag(field, cmd.list[field]);
        } else {
          doc[field] = cli::coerce_flag(field, {cmd.scalar[field]});
        }
      }
      cfg = cli::config_from_json(doc, name);
    } catch (const loop::Error& e) {
      const int code = cli::exit_code(e.kind());
      std::cerr << cli::error_json(loop::to_string(e.kind()), e.what(), code);
      return code;
    }
    return cli::run(cfg, std::cout, std::cerr);
  }
  return 2;
}
