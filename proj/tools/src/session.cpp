#include "hvsim/session.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "hvsim/error.hpp"
#include "hvsim/framework.hpp"
#include "hvsim/guestos.hpp"
#include "hvsim/hyperdbg.hpp"

namespace hvsim::session {

namespace {

std::optional<u64> number(std::string_view s) {
  u64 v = 0;
  int base = 10;
  if (s.starts_with("0x") || s.starts_with("0X")) {
    s.remove_prefix(2);
    base = 16;
  }
  if (s.empty()) return std::nullopt;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::ImageFormat, fmt::format("cannot read {}", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Script parse_script(std::string_view text) {
  Script s;
  std::istringstream in{std::string(text)};
  std::string raw;
  int n = 0;
  while (std::getline(in, raw)) {
    ++n;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (!line.starts_with("key@")) {
      s.commands.push_back(line);
      continue;
    }
    std::istringstream ls(line.substr(4));
    std::string at, code, extra;
    ls >> at >> code;
    auto a = number(at);
    auto c = number(code);
    if (!a || !c || *c > 0xFF || (ls >> extra))
      throw Error(Errc::ScriptParseError, fmt::format("line {}: expected 'key@N CODE', got '{}'", n, line));
    s.keys.push_back({*a, static_cast<u8>(*c)});
  }
  return s;
}

std::vector<KeyEvent> parse_keys(std::string_view text) {
  std::vector<KeyEvent> out;
  std::istringstream in{std::string(text)};
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    auto a = colon == std::string::npos ? std::nullopt : number(std::string_view(item).substr(0, colon));
    auto c = colon == std::string::npos ? std::nullopt : number(std::string_view(item).substr(colon + 1));
    if (!a || !c || *c > 0xFF) throw Error(Errc::ScriptParseError, fmt::format("bad key entry '{}'", item));
    out.push_back({*a, static_cast<u8>(*c)});
  }
  return out;
}

Target load_target(const RunConfig& config) {
  Target t;
  const auto names = guestos::list_fixtures();
  if (std::find(names.begin(), names.end(), config.target) != names.end()) {
    auto f = guestos::build_fixture(config.target);
    t.image = std::move(f.image);
    t.symbols = SymbolTable::parse(f.symbols);
    t.keys = std::move(f.keys);
  } else {
    if (!std::filesystem::exists(config.target)) throw Error(Errc::UnknownFixture, config.target);
    const std::string bytes = read_file(config.target);
    t.image = isa::parse_image(std::span(reinterpret_cast<const u8*>(bytes.data()), bytes.size()));
    std::string sym = config.symbols_path.value_or(config.target + ".sym");
    if (config.symbols_path || std::filesystem::exists(sym)) t.symbols = SymbolTable::parse(read_file(sym));
  }
  if (config.symbols_path && !t.symbols) t.symbols = SymbolTable::parse(read_file(*config.symbols_path));
  return t;
}

void boot_to_load_point(Machine& m, const Target& t, u64 max_steps) {
  m.load(t.image);
  if (!t.symbols) return;
  if (auto kmain = t.symbols->find("kmain")) m.run_until_pc(*kmain, max_steps);
}

RunReport run(const RunConfig& config) {
  const Target t = load_target(config);
  Machine m(config.memory);
  std::vector<KeyEvent> keys = t.keys;
  keys.insert(keys.end(), config.keys.begin(), config.keys.end());
  if (config.script) keys.insert(keys.end(), config.script->keys.begin(), config.script->keys.end());

  RunReport r;
  if (!config.hyperdbg) {
    m.load(t.image);
    for (const auto& k : keys) m.schedule_key(k.at_retired, k.scancode);
    m.run(config.max_steps);
  } else {
    // Schedule first so keys due before the load point still arrive natively.
    for (const auto& k : keys) m.schedule_key(k.at_retired, k.scancode);
    boot_to_load_point(m, t, config.max_steps);
    FrameworkConfig fc;
    if (t.symbols) fc.symbols = &*t.symbols;
    auto fw = Framework::load(m, fc);
    hyperdbg::Debugger dbg;
    hyperdbg::ScriptedSource source(config.script ? config.script->commands : std::vector<std::string>{});
    dbg.set_source(&source);
    dbg.on_output = [&](std::string_view line) { r.transcript.emplace_back(line); };
    ToolApi& api = fw->register_tool(dbg, hyperdbg::required_capabilities(), Budget{100000, std::chrono::milliseconds(0)});
    dbg.init(api);
    const u64 used = m.cpu().retired;
    fw->run(config.max_steps > used ? config.max_steps - used : 0);
    if (fw->tool_terminated()) r.transcript.push_back("tool terminated: " + fw->termination_reason());
    fw->unload();
  }
  r.digest = m.digest();
  r.debug_log.assign(m.debug_log().begin(), m.debug_log().end());
  r.retired = m.cpu().retired;
  r.halted = m.cpu().halted;
  r.diagnostic = m.diagnostic();
  return r;
}

std::string render_report(const RunReport& r, bool digest_only) {
  if (digest_only) return to_hex(r.digest) + "\n";
  std::string s;
  for (const auto& l : r.transcript) s += l + "\n";
  std::string log;
  for (unsigned char c : r.debug_log) log += fmt::format("{}{:02X}", log.empty() ? "" : " ", c);
  s += fmt::format("retired: {}{}\n", r.retired, r.halted ? " (halted)" : "");
  if (!r.diagnostic.empty()) s += fmt::format("diagnostic: {}\n", r.diagnostic);
  s += fmt::format("debug log: {}\n", log);
  s += fmt::format("digest: {}\n", to_hex(r.digest));
  return s;
}

}  // namespace hvsim::session
