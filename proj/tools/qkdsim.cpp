// Command-line front end: run, validate, analyze.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "qkdsim/qkdsim.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kTransportError = 3;
constexpr int kOtherError = 1;

void print_summary(const qkdsim::metrics::RunSummary& s) {
  using qkdsim::metrics::fmt6;
  std::cout << "sifted_bits " << s.sifted_bits << "\n"
            << "photons_received " << s.photons_received << "\n"
            << "mean_qber " << fmt6(s.mean_qber) << "\n"
            << "duty_cycle " << fmt6(s.duty_cycle) << "\n"
            << "sifted_rate_bps " << fmt6(s.sifted_rate_bps) << "\n"
            << "reset_count " << s.reset_count << "\n";
}

int cmd_run(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
            std::optional<double> duration, std::optional<std::string> transport) {
  using namespace qkdsim;
  config::RunConfig cfg;
  try {
    cfg = config::load(config_path);
    if (seed) cfg.seed = *seed;
    if (duration) cfg.duration_s = *duration;
    if (transport) cfg.transport = *transport;
    if (auto v = config::validate(cfg); !v.empty()) throw config::ConfigError(std::move(v));
  } catch (const config::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  }
  try {
    const RunResult r = run(cfg);
    write_outputs(r, cfg, out_dir);
    print_summary(r.summary);
  } catch (const protocol::TransportError& e) {
    std::cerr << "transport error, session aborted: " << e.what() << "\n";
    return kTransportError;
  } catch (const protocol::ProtocolError& e) {
    std::cerr << "protocol error, session aborted: " << e.what() << "\n";
    return kTransportError;
  }
  return kOk;
}

int cmd_validate(const std::string& config_path) {
  try {
    qkdsim::config::load(config_path);
  } catch (const qkdsim::config::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  }
  std::cout << "ok\n";
  return kOk;
}

int cmd_analyze(const std::string& out_dir) {
  using namespace qkdsim;
  try {
    const auto s = analyze(out_dir);
    metrics::write_json(std::filesystem::path(out_dir) / "analysis.json", metrics::to_json(s));
    print_summary(s);
  } catch (const config::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-event simulator of a phase-encoded BB84 fiber link"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
  std::optional<std::string> transport;

  auto* run = app.add_subcommand("run", "Run a session and write exports");
  run->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--seed", seed, "Override the seed");
  run->add_option("--duration", duration, "Override the duration in seconds");
  run->add_option("--transport", transport, "inproc or tcp:<host>:<port>");

  auto* validate = app.add_subcommand("validate", "Check a config file");
  validate->add_option("--config", config_path, "Run config (JSON)")->required();

  auto* analyze = app.add_subcommand("analyze", "Recompute metrics from stored traces");
  analyze->add_option("--out", out_dir, "Directory written by run")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, out_dir, seed, duration, transport);
    if (*validate) return cmd_validate(config_path);
    if (*analyze) return cmd_analyze(out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOtherError;
  }
  return kOtherError;
}
