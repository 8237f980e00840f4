#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hvsim/isa.hpp"
#include "hvsim/machine.hpp"
#include "hvsim/osdep.hpp"

namespace hvsim::session {

/// A debugger script: `key@N 0xFF` lines join the input schedule, every
/// other non-blank, non-`#` line is a debugger command.
struct Script {
  std::vector<KeyEvent> keys;
  std::vector<std::string> commands;
};

/// Throws ScriptParseError naming the offending line.
Script parse_script(std::string_view text);
/// `N:CODE[,N:CODE...]`, e.g. `5000:0xFF,6000:97`.
std::vector<KeyEvent> parse_keys(std::string_view text);

struct RunConfig {
  std::string target;  // fixture name or image file
  std::optional<std::string> symbols_path;
  std::size_t memory = kDefaultMemory;
  bool hyperdbg = false;
  std::vector<KeyEvent> keys;
  std::optional<Script> script;
  std::optional<std::string> serve;  // host:port
  u64 max_steps = 50'000'000;
};

struct Target {
  isa::AssembledImage image;
  std::optional<SymbolTable> symbols;
  std::vector<KeyEvent> keys;  // fixture default schedule
};

/// Fixture by name, else an image file (symbols from --symbols or FILE.sym).
Target load_target(const RunConfig& config);

struct RunReport {
  Digest digest{};
  std::string debug_log;
  std::vector<std::string> transcript;
  u64 retired = 0;
  bool halted = false;
  std::string diagnostic;
  // Served sessions: the input as the guest saw it, replayable as a script.
  std::vector<KeyEvent> inputs;
  std::vector<std::string> commands;
};

/// Native run, or a scripted hyperdbg session. Deterministic.
RunReport run(const RunConfig& config);

/// Machine at the point the framework is loaded: kmain if the image exports
/// it, otherwise the reset state.
void boot_to_load_point(Machine& m, const Target& t, u64 max_steps);

std::string render_report(const RunReport& r, bool digest_only);

}  // namespace hvsim::session
