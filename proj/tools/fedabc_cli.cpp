#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedabc/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string transport;
  std::string listen;
  std::string connect;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
  cmd->add_option("--out-dir", f.out_dir, "directory for outputs")->capture_default_str();
}

fedabc::ExperimentConfig resolve(const CommonFlags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw fedabc::ConfigError("config '" + f.config + "' is not valid JSON: " + e.what());
    }
  }
  if (f.seed) j["seed"] = *f.seed;
  if (!f.transport.empty()) j["federation"]["transport"] = f.transport;
  if (!f.listen.empty()) j["federation"]["listen"] = f.listen;
  if (!f.connect.empty()) j["federation"]["connect"] = f.connect;
  return fedabc::config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated ABC inference of Gaussian mixtures with autoencoder summaries"};
  app.require_subcommand(1);

  CommonFlags gen_flags, prep_flags, run_flags;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_flags);

  auto* prep = app.add_subcommand("prepare", "filter, partition, split and standardize the dataset");
  add_common(prep, prep_flags);

  auto* run = app.add_subcommand("run", "train sites, run federated inference and evaluate");
  add_common(run, run_flags);
  run->add_option("--transport", run_flags.transport, "inproc or tcp")->check(CLI::IsMember({"inproc", "tcp"}));
  run->add_option("--listen", run_flags.listen, "server bind address host:port (tcp)");
  run->add_option("--connect", run_flags.connect, "address the sites dial, host:port (tcp)");
  bool quiet = false;
  run->add_flag("--quiet", quiet, "suppress progress lines");

  std::vector<std::string> report_paths;
  std::string report_json;
  auto* report = app.add_subcommand("report", "aggregate reports across runs (mean ± sd)");
  report->add_option("paths", report_paths, "run directories or report.json files")->required();
  report->add_option("--json", report_json, "also write the aggregate as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_flags);
      fedabc::cmd_gen_data(cfg, gen_flags.out_dir);
      std::cout << "wrote " << (std::filesystem::path(gen_flags.out_dir) / "data.csv").string() << "\n";
    } else if (prep->parsed()) {
      const auto cfg = resolve(prep_flags);
      const auto p = fedabc::cmd_prepare(cfg, prep_flags.out_dir);
      std::cout << "kept " << p.kept_columns.size() << " of " << p.source_columns << " columns\n";
      for (std::size_t s = 0; s < p.sites.size(); ++s) {
        const auto& site = p.sites[s];
        std::cout << "site " << s + 1 << ": train " << site.train.count(0) << "/" << site.train.count(1) << ", test "
                  << site.test.count(0) << "/" << site.test.count(1) << "\n";
      }
    } else if (run->parsed()) {
      const auto cfg = resolve(run_flags);
      const int code = fedabc::cmd_run(cfg, run_flags.out_dir, quiet ? nullptr : &std::cerr);
      std::cout << fedabc::detail::read_text(std::filesystem::path(run_flags.out_dir) / "report.txt");
      if (code == 2) std::cerr << "partial result: fewer parameter sets accepted than requested\n";
      return code;
    } else if (report->parsed()) {
      const auto agg = fedabc::cmd_report(report_paths, std::cerr);
      std::cout << fedabc::render_text(agg);
      if (!report_json.empty()) {
        fedabc::detail::write_text(report_json, fedabc::to_json_value(agg).dump(2) + "\n");
      }
    }
  } catch (const fedabc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
