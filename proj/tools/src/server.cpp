#include "hvsim/server.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "hvsim/error.hpp"
#include "hvsim/framework.hpp"
#include "hvsim/hyperdbg.hpp"

namespace hvsim::server {

namespace asio = boost::asio;
using asio::ip::tcp;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string base64(std::span<const u8> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<u8> unbase64(std::string_view text) {
  std::vector<u8> out(3 * (text.size() / 4) + 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(Errc::ImageFormat, "bad base64");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock counts padding bytes as data.
  for (auto it = text.rbegin(); it != text.rend() && *it == '='; ++it) --len;
  out.resize(len);
  return out;
}

namespace {

// Network side: owns the socket on its own thread. The machine thread only
// sees the two queues.
class Link {
 public:
  Link(asio::io_context& io, tcp::socket socket) : io_(io), socket_(std::move(socket)) {}

  void start() { read(); }

  void send(json msg) {
    asio::post(io_, [this, line = msg.dump() + "\n"]() mutable {
      out_.push_back(std::move(line));
      if (out_.size() == 1) write();
    });
  }

  /// Next inbound message, waiting at most `wait`.
  std::optional<json> pop(std::chrono::milliseconds wait) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, wait, [&] { return !in_.empty() || closed_; });
    if (in_.empty()) return std::nullopt;
    json j = std::move(in_.front());
    in_.pop_front();
    return j;
  }

  bool closed() {
    std::lock_guard lk(mu_);
    return closed_ && in_.empty();
  }

 private:
  void read() {
    asio::async_read_until(socket_, buf_, '\n', [this](boost::system::error_code ec, std::size_t n) {
      if (ec) return close();
      std::string line(asio::buffers_begin(buf_.data()), asio::buffers_begin(buf_.data()) + static_cast<long>(n));
      buf_.consume(n);
      json j = json::parse(line, nullptr, false);
      {
        std::lock_guard lk(mu_);
        in_.push_back(j.is_discarded() ? json{{"t", "bad"}, {"s", line}} : std::move(j));
      }
      cv_.notify_all();
      read();
    });
  }

  void write() {
    asio::async_write(socket_, asio::buffer(out_.front()), [this](boost::system::error_code ec, std::size_t) {
      if (ec) return close();
      out_.pop_front();
      if (!out_.empty()) write();
    });
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  asio::io_context& io_;
  tcp::socket socket_;
  asio::streambuf buf_;
  std::deque<std::string> out_;  // io thread only
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<json> in_;
  bool closed_ = false;
};

class Publisher {
 public:
  Publisher(Machine& m, Link& link) : m_(m), link_(link) {}

  void frame(bool force = false) {
    const auto fb = m_.framebuffer();
    const bool changed = !std::equal(fb.begin(), fb.end(), last_.begin(), last_.end());
    if (!force && !changed && Clock::now() - sent_ < kHeartbeat) return;
    last_.assign(fb.begin(), fb.end());
    sent_ = Clock::now();
    link_.send({{"t", "frame"}, {"seq", ++seq_}, {"b64", base64(last_)}});
  }
  void state(std::string_view s) {
    if (s == state_) return;
    state_ = s;
    link_.send({{"t", "state"}, {"s", s}});
  }
  void out(std::string_view s) { link_.send({{"t", "out"}, {"s", s}}); }
  void err(std::string_view s) { link_.send({{"t", "err"}, {"s", s}}); }

 private:
  Machine& m_;
  Link& link_;
  u64 seq_ = 0;
  std::vector<u8> last_;
  Clock::time_point sent_{};
  std::string state_;
};

// Interactive input while the guest is stopped: cmd messages, or keys
// typed into the debugger through the (root-mode polled) keyboard.
class ServedSource : public hyperdbg::CommandSource {
 public:
  ServedSource(Machine& m, Link& link, Publisher& pub, session::RunReport& report)
      : m_(m), link_(link), pub_(pub), report_(report) {}

  std::optional<std::string> next(ToolApi& api, hyperdbg::Debugger& dbg) override {
    while (true) {
      pub_.frame();
      while (auto k = dbg.poll_key(api)) {
        if (*k == '\n' || *k == '\r') {
          std::string line = std::exchange(typed_, {});
          report_.commands.push_back(line);
          return line;
        }
        if (*k == 0x08) {
          if (!typed_.empty()) typed_.pop_back();
        } else if (*k >= 0x20 && *k < 0x7F) {
          typed_.push_back(static_cast<char>(*k));
        }
      }
      if (link_.closed()) return std::nullopt;
      auto msg = link_.pop(std::chrono::milliseconds(20));
      if (!msg) continue;
      const std::string t = msg->value("t", "");
      if (t == "cmd") {
        std::string line = msg->value("s", "");
        report_.commands.push_back(line);
        return line;
      }
      if (t == "key") m_.push_key(static_cast<u8>(msg->value("code", 0)));
      else if (t != "ctl") pub_.err(fmt::format("unknown message type '{}'", t));
    }
  }

 private:
  Machine& m_;
  Link& link_;
  Publisher& pub_;
  session::RunReport& report_;
  std::string typed_;
};

tcp::endpoint parse_endpoint(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::BindFailure, fmt::format("expected HOST:PORT, got '{}'", addr));
  try {
    const auto host = asio::ip::make_address(addr.substr(0, colon));
    const int port = std::stoi(addr.substr(colon + 1));
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    return {host, static_cast<unsigned short>(port)};
  } catch (const std::exception& e) {
    throw Error(Errc::BindFailure, fmt::format("'{}': {}", addr, e.what()));
  }
}

}  // namespace

session::RunReport serve(const session::RunConfig& config, ServeOptions options) {
  const session::Target target = session::load_target(config);
  asio::io_context io;
  tcp::acceptor acceptor(io);
  try {
    const auto ep = parse_endpoint(config.serve.value_or("127.0.0.1:0"));
    acceptor.open(ep.protocol());
    acceptor.set_option(tcp::acceptor::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen(1);
  } catch (const boost::system::system_error& e) {
    throw Error(Errc::BindFailure, e.what());
  }

  Machine m(config.memory);
  // Same schedule as a scripted run, so a served session replays exactly.
  for (const auto& k : target.keys) m.schedule_key(k.at_retired, k.scancode);
  for (const auto& k : config.keys) m.schedule_key(k.at_retired, k.scancode);
  std::unique_ptr<Framework> fw;
  FrameworkConfig fc;
  if (target.symbols) fc.symbols = &*target.symbols;
  if (config.hyperdbg) {
    session::boot_to_load_point(m, target, config.max_steps);
    fw = Framework::load(m, fc);
  } else {
    m.load(target.image);
  }

  if (options.on_listening) options.on_listening(acceptor.local_endpoint().port());
  tcp::socket socket(io);
  acceptor.accept(socket);
  Link link(io, std::move(socket));
  link.start();
  auto guard = asio::make_work_guard(io);
  std::thread net([&] { io.run(); });

  session::RunReport report;
  Publisher pub(m, link);
  hyperdbg::Debugger dbg;
  ServedSource source(m, link, pub, report);
  if (fw) {
    dbg.set_source(&source);
    dbg.on_output = [&](std::string_view line) {
      report.transcript.emplace_back(line);
      pub.out(line);
    };
    dbg.on_mode = [&](bool debug) {
      pub.state(debug ? "debug" : "running");
      pub.frame(true);
    };
    dbg.init(fw->register_tool(dbg, hyperdbg::required_capabilities(), Budget{100000, std::chrono::milliseconds(0)}));
  }

  pub.state("running");
  pub.frame(true);
  bool paused = false;
  u64 steps = 0;
  auto handle = [&](const json& msg) {
    const std::string t = msg.value("t", "");
    if (t == "key") {
      if (m.cpu().halted) return;
      const u8 code = static_cast<u8>(msg.value("code", 0));
      m.schedule_key(m.cpu().retired, code);
      report.inputs.push_back({m.cpu().retired, code});
    } else if (t == "cmd") {
      pub.err("not in debug state");
    } else if (t == "ctl") {
      const std::string s = msg.value("s", "");
      if (s == "pause") paused = true;
      else if (s == "resume") paused = false;
      else pub.err(fmt::format("unknown ctl '{}'", s));
    } else {
      pub.err(fmt::format("unknown message type '{}'", t));
    }
  };
  while (!link.closed()) {
    while (auto msg = link.pop(std::chrono::milliseconds(0))) handle(*msg);
    if (!paused && !m.cpu().halted && steps < config.max_steps) {
      const u64 before = m.cpu().retired;
      if (fw && fw->loaded()) fw->run(options.slice);
      else m.run(options.slice);
      steps += std::max<u64>(1, m.cpu().retired - before);
    }
    if (m.cpu().halted) pub.state("halted");
    pub.frame();
    // Pace the guest; this is also the idle wait while paused or halted.
    const bool idle = paused || m.cpu().halted || steps >= config.max_steps;
    if (auto msg = link.pop(std::chrono::milliseconds(idle ? 20 : 1))) handle(*msg);
  }

  if (fw) fw->unload();
  guard.reset();
  io.stop();
  net.join();
  report.digest = m.digest();
  report.debug_log.assign(m.debug_log().begin(), m.debug_log().end());
  report.retired = m.cpu().retired;
  report.halted = m.cpu().halted;
  report.diagnostic = m.diagnostic();
  return report;
}

}  // namespace hvsim::server
