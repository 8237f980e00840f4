#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hvsim/framework.hpp"

namespace hvsim::hyperdbg {

inline constexpr u8 kDefaultHotkey = 0xFF;
inline constexpr std::size_t kMaxFrames = 64;

struct Config {
  u8 hotkey = kDefaultHotkey;
};

enum class Mode : u8 { Passive, Interactive };

struct Frame {
  u32 address = 0;
  std::string symbol;
};

struct Backtrace {
  std::vector<Frame> frames;
  bool truncated = false;  // walk failed: rendered as <unwalkable>
  std::vector<std::string> lines() const;
};

class Debugger;

/// Where interactive command lines come from. Returning nullopt ends the
/// interactive phase as if `c` had been typed.
class CommandSource {
 public:
  virtual ~CommandSource() = default;
  virtual std::optional<std::string> next(ToolApi& api, Debugger& dbg) = 0;
};

/// Fixed list of lines; each interactive phase consumes lines up to and
/// including its `c`.
class ScriptedSource : public CommandSource {
 public:
  explicit ScriptedSource(std::vector<std::string> lines) : lines_(std::move(lines)) {}
  std::optional<std::string> next(ToolApi& api, Debugger& dbg) override;
  bool exhausted() const { return pos_ >= lines_.size(); }

 private:
  std::vector<std::string> lines_;
  std::size_t pos_ = 0;
};

/// Capabilities the debugger must be registered with.
Capabilities required_capabilities();

class Debugger : public Tool {
 public:
  explicit Debugger(Config config = {});

  /// Install the keyboard-port subscription and the breakpoint/watchpoint
  /// subscriptions used for user-set points.
  void init(ToolApi& api);

  EventOutcome on_event(ToolApi& api, const Event& event) override;
  void on_stop(ToolApi& api) override;
  void on_terminated(std::string_view reason) override;

  /// Run one command; `c` and `q` leave the interactive phase.
  std::vector<std::string> execute(ToolApi& api, std::string_view line);
  Backtrace backtrace(ToolApi& api);
  /// Root-mode keyboard poll: status port, then data port.
  std::optional<u8> poll_key(ToolApi& api);

  void set_source(CommandSource* source) { source_ = source; }
  Mode mode() const { return mode_; }
  u8 hotkey() const { return config_.hotkey; }
  u64 entered_at() const { return entered_at_; }
  u32 backup_address() const { return backup_; }
  const std::string& banner() const { return banner_; }

  /// Transcript sink: every command echo and output line, in order.
  std::function<void(std::string_view)> on_output;
  /// Called on entering (true) and leaving (false) the interactive phase.
  std::function<void(bool)> on_mode;

 private:
  void enter_ui(ToolApi& api);
  void leave_ui(ToolApi& api);
  void paint(ToolApi& api);
  void emit(std::string_view line);
  std::string symbolize(ToolApi& api, u32 va);
  std::optional<u32> parse_address(ToolApi& api, std::string_view tok);
  std::vector<u8> read_guest_view(ToolApi& api, u32 va, std::size_t n);
  void detach(ToolApi& api);

  Config config_;
  Mode mode_ = Mode::Passive;
  CommandSource* source_ = nullptr;
  bool leave_ = false;
  bool detached_ = false;
  u32 backup_ = 0;
  u64 entered_at_ = 0;
  std::string banner_;
  std::vector<std::string> last_output_;
  std::string command_line_;
  std::vector<u32> breakpoints_;
  std::vector<u32> watchpoints_;
  std::vector<u32> subscriptions_;
  std::optional<u32> syscall_sub_;
};

}  // namespace hvsim::hyperdbg
