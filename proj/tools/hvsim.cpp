#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "hvsim/error.hpp"
#include "hvsim/guestos.hpp"
#include "hvsim/server.hpp"
#include "hvsim/session.hpp"

using namespace hvsim;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::ScriptParseError, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hvsim: thin-hypervisor simulator with the HyperDbg kernel debugger"};
  app.require_subcommand(1);

  session::RunConfig cfg;
  std::string tool = "none", keys, script, serve;
  bool digest_only = false;
  auto* run = app.add_subcommand("run", "run a fixture or image natively or under the debugger");
  run->add_option("target", cfg.target, "fixture name or image file")->required();
  run->add_option("--symbols", cfg.symbols_path, "symbols file (HEX NAME per line)");
  run->add_option("--mem", cfg.memory, "physical memory in bytes")->capture_default_str();
  run->add_option("--tool", tool, "analysis tool")->check(CLI::IsMember({"none", "hyperdbg"}));
  run->add_option("--keys", keys, "input schedule N:CODE[,N:CODE...]");
  auto* script_opt = run->add_option("--script", script, "debugger script file");
  auto* serve_opt = run->add_option("--serve", serve, "serve the console protocol on HOST:PORT");
  script_opt->excludes(serve_opt);
  run->add_option("--max-steps", cfg.max_steps, "step budget")->capture_default_str();
  run->add_flag("--digest-only", digest_only, "print only the final digest");

  std::string fixture, out;
  auto* build = app.add_subcommand("build", "assemble a fixture to an image + symbols file");
  build->add_option("fixture", fixture)->required();
  build->add_option("-o,--output", out, "image path (symbols go to PATH.sym)")->required();

  auto* list = app.add_subcommand("list", "list fixtures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*list) {
      for (const auto& n : guestos::list_fixtures()) std::cout << n << "\n";
      return 0;
    }
    if (*build) {
      const auto f = guestos::build_fixture(fixture);
      const auto bytes = isa::serialize_image(f.image);
      std::ofstream(out, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
      std::ofstream(out + ".sym") << f.symbols;
      std::cout << "wrote " << out << " (" << bytes.size() << " bytes) and " << out << ".sym\n";
      return 0;
    }
    if (!script.empty() && !serve.empty()) {
      std::cerr << "--script and --serve are mutually exclusive\n";
      return 2;
    }
    cfg.hyperdbg = tool == "hyperdbg";
    if (!keys.empty()) cfg.keys = session::parse_keys(keys);
    if (!script.empty()) {
      if (!cfg.hyperdbg) {
        std::cerr << "--script needs --tool hyperdbg\n";
        return 2;
      }
      cfg.script = session::parse_script(slurp(script));
    }
    session::RunReport report;
    if (!serve.empty()) {
      cfg.serve = serve;
      server::ServeOptions opt;
      opt.on_listening = [](unsigned short port) { std::cerr << "listening on port " << port << "\n"; };
      report = server::serve(cfg, opt);
    } else {
      report = session::run(cfg);
    }
    std::cout << session::render_report(report, digest_only);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
