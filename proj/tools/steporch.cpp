// Command-line entry points. Exit status: 0 success, 2 bad input (flags,
// files, values), 1 anything that failed at run time.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "steporch/config.hpp"
#include "steporch/gateway.hpp"
#include "steporch/sim.hpp"
#include "steporch/stream_tokenizer.hpp"
#include "steporch/tokens.hpp"

namespace {

using namespace steporch;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NotFoundError("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

int cmd_simulate(const std::string& path, bool no_spec, std::uint64_t seed, const std::string& report,
                 const std::string& csv) {
  const Scenario s = load_scenario(path);
  const SimulationReport r = run_with_control(s, !no_spec, seed, RunOptions{false});
  const auto j = r.to_json();
  if (!report.empty()) write_text(report, j.dump(2) + "\n");
  if (!csv.empty()) write_text(csv, r.to_csv());
  std::cout << "turns=" << r.turns.size() << " issued=" << r.speculations_issued
            << " committed=" << r.speculations_committed << " commit_rate=" << r.commit_rate;
  if (r.mean_latency_ms) std::cout << " mean_latency_ms=" << *r.mean_latency_ms;
  if (r.mean_latency_reduction_ms) std::cout << " mean_latency_reduction_ms=" << *r.mean_latency_reduction_ms;
  std::cout << "\n";
  return 0;
}

int cmd_trace(const std::string& path, bool no_spec, std::uint64_t seed) {
  const SimulationReport r = run(load_scenario(path), !no_spec, seed);
  for (const auto& line : r.trace) std::cout << line << "\n";
  return 0;
}

int cmd_tokenize(const std::string& wav, const std::string& tokens_out) {
  const auto pcm = read_pcm_file(wav);
  const auto tokens = tokenize_pcm(pcm);
  if (tokens_out.empty()) {
    write_token_text(std::cout, tokens);
  } else {
    std::ofstream out(tokens_out);
    if (!out) throw NotFoundError("cannot write " + tokens_out);
    write_token_text(out, tokens);
    std::cout << tokens.size() << " tokens written to " << tokens_out << "\n";
  }
  return 0;
}

int cmd_serve(std::uint16_t port, const std::string& host, const std::string& config_path) {
  const SessionConfig cfg = load_session_config(config_path);
  // Block the stop signals before any thread exists so sigwait sees them.
  sigset_t stop;
  sigemptyset(&stop);
  sigaddset(&stop, SIGINT);
  sigaddset(&stop, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop, nullptr);
  GatewayServer server(cfg);
  server.start(port, host);
  std::cout << "listening on " << host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&stop, &sig);
  server.stop();
  std::cout << "stopped after " << server.sessions_served() << " session(s)" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Full-duplex voice orchestration: simulator, tokenizer and session server"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string scenario, report, csv, wav, tokens_out, config_path, host = "127.0.0.1";
  bool no_spec = false;
  std::uint64_t seed = 0;
  std::uint16_t port = 0;

  auto* sim = app.add_subcommand("simulate", "Run a scenario with and without speculation");
  sim->add_option("scenario", scenario, "Scenario JSON")->required();
  sim->add_flag("--no-speculation", no_spec, "Disable speculation in the measured run");
  sim->add_option("--seed", seed, "Run seed");
  sim->add_option("--report", report, "Write the JSON report here");
  sim->add_option("--csv", csv, "Write per-turn CSV here");

  auto* serve = app.add_subcommand("serve", "Accept framed sessions over TCP");
  serve->add_option("--port", port, "TCP port (0 picks one)")->required();
  serve->add_option("--config", config_path, "Session config JSON (STEP_ORCH_CONFIG overrides)");
  serve->add_option("--host", host, "Bind address");

  auto* tok = app.add_subcommand("tokenize", "Tokenize a 16 kHz mono WAV");
  tok->add_option("wav", wav, "Input WAV or raw s16le PCM")->required();
  tok->add_option("--tokens", tokens_out, "Write unified ids here instead of stdout");

  auto* trace = app.add_subcommand("trace", "Print the event/action log of a scenario run");
  trace->add_option("scenario", scenario, "Scenario JSON")->required();
  trace->add_flag("--no-speculation", no_spec, "Disable speculation");
  trace->add_option("--seed", seed, "Run seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) return cmd_simulate(scenario, no_spec, seed, report, csv);
    if (*trace) return cmd_trace(scenario, no_spec, seed);
    if (*tok) return cmd_tokenize(wav, tokens_out);
    if (*serve) return cmd_serve(port, host, config_path);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NotFoundError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
