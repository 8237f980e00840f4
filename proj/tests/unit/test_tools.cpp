#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <sys/wait.h>

#include <boost/asio.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "doctest.h"
#include "hvsim/error.hpp"
#include "hvsim/hyperdbg.hpp"
#include "hvsim/server.hpp"
#include "hvsim/session.hpp"
#include "oracle.hpp"

using namespace hvsim;
namespace g = hvsim::guestos;
namespace hd = hvsim::hyperdbg;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return Errc::SyntaxError;
}

bool has_line(const std::vector<std::string>& lines, std::string_view needle) {
  return std::any_of(lines.begin(), lines.end(), [&](const auto& l) { return l.find(needle) != std::string::npos; });
}

session::RunReport scripted(std::string_view fixture, std::string_view script) {
  session::RunConfig c;
  c.target = fixture;
  c.hyperdbg = true;
  c.script = session::parse_script(script);
  return session::run(c);
}

}  // namespace

TEST_SUITE("hyperdbg") {
  TEST_CASE("unknown and malformed commands print help") {
    const auto r = scripted("call_tree", "key@500 0xFF\nxyz\nb\nd 99\nc\n");
    CHECK(has_line(r.transcript, "unknown command 'xyz'"));
    CHECK(has_line(r.transcript, "bad command: b needs an address"));
    CHECK(has_line(r.transcript, "bad command: no breakpoint or watchpoint #99"));
    CHECK(std::count(r.transcript.begin(), r.transcript.end(), "type h for help") == 3);
    CHECK(r.halted);
  }

  TEST_CASE("breakpoint by symbol, backtrace and process list") {
    const auto r = scripted("call_tree", "key@500 0xFF\nb f2\nc\nbt\nps\nq\n");
    CHECK(has_line(r.transcript, "-- debug: breakpoint #"));
    const auto bt = std::find(r.transcript.begin(), r.transcript.end(), "> bt");
    REQUIRE(bt + 3 < r.transcript.end());
    CHECK(bt[1].ends_with(" f2"));
    CHECK(bt[2].find(" f1+0x") != std::string::npos);
    CHECK(bt[3].find(" kmain+0x") != std::string::npos);
    CHECK(has_line(r.transcript, "* pid 0   kernel"));
    CHECK(has_line(r.transcript, "debugger detached"));
    CHECK(r.debug_log == oracle::run_native(g::build_fixture("call_tree")).log);
  }

  TEST_CASE("the guest screen is restored after the debugger leaves") {
    const auto fx = g::build_fixture("kbd_echo");
    // Two hotkeys: the debugger paints its UI twice and restores the screen each time;
    // the echoed text (and so the log) is unaffected.
    session::RunConfig c;
    c.target = "kbd_echo";
    c.hyperdbg = true;
    c.script = session::parse_script("key@1500 0xFF\nr\nc\nkey@3500 0xFF\nm 0x8000 4\nc\n");
    const auto r = session::run(c);
    CHECK(r.halted);
    CHECK(r.debug_log == fx.expected_log);
    CHECK(has_line(r.transcript, "-- debug: hotkey at retired"));
    CHECK(std::count_if(r.transcript.begin(), r.transcript.end(),
                        [](const auto& l) { return l.starts_with("-- debug: hotkey"); }) == 2);
  }

  TEST_CASE("root-mode keyboard poll") {
    oracle::Hosted h("counter_loop");
    hd::Debugger dbg;
    ToolApi& api = h.fw->register_tool(dbg, hd::required_capabilities());
    dbg.init(api);
    CHECK_FALSE(dbg.poll_key(api));
    h.m->push_key('x');
    h.m->push_key('y');
    CHECK(dbg.poll_key(api) == u8('x'));
    CHECK(dbg.poll_key(api) == u8('y'));
    CHECK_FALSE(dbg.poll_key(api));
  }

  TEST_CASE("watch and step commands") {
    const auto r = scripted("counter_loop", "key@200 0xFF\nw 0x8000\nc\nr\ns 3\nd 4\nc\n");
    CHECK(has_line(r.transcript, "watchpoint #"));
    CHECK(has_line(r.transcript, "-- debug: watchpoint #"));
    CHECK(has_line(r.transcript, "stepped 3: "));
    CHECK(r.debug_log == g::build_fixture("counter_loop").expected_log);
  }

  TEST_CASE("quitting detaches but keeps the guest virtualized") {
    oracle::Hosted h("call_tree");
    hd::Debugger dbg;
    ToolApi& api = h.fw->register_tool(dbg, hd::required_capabilities());
    dbg.init(api);
    hd::ScriptedSource src({"b f1", "c", "q"});
    dbg.set_source(&src);
    h.m->push_key(hd::kDefaultHotkey);
    h.run();
    CHECK(src.exhausted());
    CHECK(h.fw->loaded());
    CHECK(h.m->cpu().halted);
    CHECK(dbg.mode() == hd::Mode::Passive);
    CHECK(oracle::log_of(*h.m) == h.fx.expected_log);
  }

  TEST_CASE("backtrace lines") {
    hd::Backtrace bt;
    bt.frames = {{0x10039, "f2"}, {0x10034, "f1+0x9"}};
    bt.truncated = true;
    const auto l = bt.lines();
    REQUIRE(l.size() == 3);
    CHECK(l[0] == "#0 0x00010039 f2");
    CHECK(l[2] == "<unwalkable>");
  }
}

TEST_SUITE("session") {
  TEST_CASE("script parsing") {
    const auto s = session::parse_script("# comment\n\nkey@5000 0xFF\nr\n  b f2  \nkey@6000 97\nc\n");
    REQUIRE(s.keys.size() == 2);
    CHECK(s.keys[0].at_retired == 5000);
    CHECK(s.keys[0].scancode == 0xFF);
    CHECK(s.keys[1].scancode == 97);
    CHECK(s.commands == std::vector<std::string>{"r", "b f2", "c"});
    CHECK(code_of([] { session::parse_script("key@ 0xFF\n"); }) == Errc::ScriptParseError);
    CHECK(code_of([] { session::parse_script("key@10 0x1FF\n"); }) == Errc::ScriptParseError);
  }

  TEST_CASE("key schedule parsing") {
    const auto k = session::parse_keys("5000:0xFF,6000:97");
    REQUIRE(k.size() == 2);
    CHECK(k[1].at_retired == 6000);
    CHECK(k[1].scancode == 97);
    CHECK(session::parse_keys("").empty());
    CHECK(code_of([] { session::parse_keys("5000"); }) == Errc::ScriptParseError);
    CHECK(code_of([] { session::parse_keys("x:1"); }) == Errc::ScriptParseError);
    CHECK(code_of([] { session::parse_keys("1:256"); }) == Errc::ScriptParseError);
  }

  TEST_CASE("native run report") {
    session::RunConfig c;
    c.target = "two_procs";
    const auto r = session::run(c);
    const auto native = oracle::run_native(g::build_fixture("two_procs"));
    CHECK(r.digest == native.digest);
    CHECK(r.debug_log == native.log);
    CHECK(r.retired == native.retired);
    const auto text = session::render_report(r, false);
    CHECK(text.find("(halted)") != std::string::npos);
    CHECK(session::render_report(r, true) == to_hex(r.digest) + "\n");
  }

  TEST_CASE("sessions are deterministic") {
    const char* s = "key@500 0xFF\nb f2\nc\ns\nbt\nc\n";
    const auto a = scripted("call_tree", s);
    const auto b = scripted("call_tree", s);
    CHECK(a.digest == b.digest);
    CHECK(a.transcript == b.transcript);
  }

  TEST_CASE("image files with symbols") {
    const auto fx = g::build_fixture("call_tree");
    const std::string path = "session_call_tree.img";
    {
      std::ofstream out(path, std::ios::binary);
      const auto bytes = isa::serialize_image(fx.image);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      std::ofstream(path + ".sym") << fx.symbols;
    }
    session::RunConfig c;
    c.target = path;
    const auto t = session::load_target(c);
    REQUIRE(t.symbols);
    CHECK(t.symbols->address("f2") == *fx.image.symbol("f2"));
    CHECK(session::run(c).digest == oracle::run_native(fx).digest);
    c.target = "no_such_thing";
    CHECK_THROWS_AS(session::load_target(c), Error);
    std::remove(path.c_str());
    std::remove((path + ".sym").c_str());
  }
}

namespace {

namespace asio = boost::asio;
using asio::ip::tcp;
using json = nlohmann::json;

// Line-oriented test client.
struct Client {
  explicit Client(unsigned short port) : sock(io) { sock.connect({asio::ip::make_address("127.0.0.1"), port}); }
  void send(const json& j) { asio::write(sock, asio::buffer(j.dump() + "\n")); }
  json recv() {
    asio::read_until(sock, buf, '\n');
    std::istream is(&buf);
    std::string line;
    std::getline(is, line);
    return json::parse(line);
  }
  // Next message of type t, skipping others (frames arrive continuously).
  json expect(std::string_view t, std::vector<json>* skipped = nullptr) {
    for (int i = 0; i < 10000; ++i) {
      json j = recv();
      if (j["t"] == t) return j;
      if (skipped) skipped->push_back(j);
    }
    FAIL("no message of type " << t);
    return {};
  }
  asio::io_context io;
  tcp::socket sock;
  asio::streambuf buf;
};

struct Served {
  explicit Served(session::RunConfig c, u64 slice = 2000) {
    std::promise<unsigned short> bound;
    auto port = bound.get_future();
    c.serve = "127.0.0.1:0";
    result = std::async(std::launch::async, [c, slice, &bound] {
      server::ServeOptions o;
      o.slice = slice;
      o.on_listening = [&](unsigned short p) { bound.set_value(p); };
      return server::serve(c, o);
    });
    client.emplace(port.get());
  }
  std::future<session::RunReport> result;
  std::optional<Client> client;
  session::RunReport finish() {
    client.reset();
    return result.get();
  }
};

}  // namespace

TEST_SUITE("server") {
  TEST_CASE("base64 round trip") {
    for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 100u, 4000u}) {
      std::vector<u8> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<u8>(i * 37 + 11);
      CHECK(server::unbase64(server::base64(v)) == v);
    }
    CHECK(server::base64(std::vector<u8>{'h', 'i'}) == "aGk=");
  }

  TEST_CASE("bind failures are reported") {
    session::RunConfig c;
    c.target = "counter_loop";
    c.serve = "not-an-address";
    CHECK(code_of([&] { server::serve(c); }) == Errc::BindFailure);
    c.serve = "127.0.0.1:99999";
    CHECK(code_of([&] { server::serve(c); }) == Errc::BindFailure);
  }

  TEST_CASE("frames, state and errors over the wire") {
    session::RunConfig c;
    c.target = "counter_loop";
    Served s(c);
    auto& cl = *s.client;
    json st = cl.expect("state");
    CHECK(st["s"] == "running");
    const json f = cl.expect("frame");
    CHECK(server::unbase64(f["b64"].get<std::string>()).size() == kFramebufferBytes);
    cl.send({{"t", "cmd"}, {"s", "r"}});
    CHECK(cl.expect("err")["s"] == "not in debug state");
    cl.send({{"t", "bogus"}});
    CHECK(cl.expect("err")["s"].get<std::string>().find("bogus") != std::string::npos);
    CHECK(cl.expect("state")["s"] == "halted");
    // Heartbeat: frames keep coming while nothing changes.
    const u64 a = cl.expect("frame")["seq"];
    const u64 b = cl.expect("frame")["seq"];
    CHECK(b == a + 1);
    const auto r = s.finish();
    CHECK(r.digest == oracle::run_native(g::build_fixture("counter_loop")).digest);
  }

  TEST_CASE("interactive debugging over the wire, replayable as a script") {
    session::RunConfig c;
    c.target = "kbd_echo";
    c.hyperdbg = true;
    // One instruction per slice paces the guest far below the client, so the
    // hotkey lands well before the fixture's own Enter key ends the run.
    Served s(c, 1);
    auto& cl = *s.client;
    CHECK(cl.expect("state")["s"] == "running");
    cl.send({{"t", "key"}, {"code", 0xFF}});
    CHECK(cl.expect("state")["s"] == "debug");
    cl.send({{"t", "cmd"}, {"s", "r"}});
    CHECK(cl.expect("out")["s"] == "> r");
    CHECK(cl.expect("out")["s"].get<std::string>().starts_with("pc 0x"));
    cl.send({{"t", "cmd"}, {"s", "c"}});
    CHECK(cl.expect("state")["s"] == "running");
    // The fixture's own key schedule (ending in Enter) finishes the run.
    CHECK(cl.expect("state")["s"] == "halted");
    cl.send({{"t", "key"}, {"code", 'z'}});  // ignored once halted
    const auto live = s.finish();
    CHECK(live.halted);
    REQUIRE(live.inputs.size() == 1);
    CHECK(live.inputs[0].scancode == 0xFF);
    CHECK(live.commands == std::vector<std::string>{"r", "c"});

    // Replay: the same inputs at the same retired counts, the same commands.
    std::string script;
    for (const auto& k : live.inputs) script += fmt::format("key@{} {}\n", k.at_retired, k.scancode);
    for (const auto& l : live.commands) script += l + "\n";
    session::RunConfig r = c;
    r.script = session::parse_script(script);
    const auto replay = session::run(r);
    CHECK(replay.retired == live.retired);
    CHECK(replay.transcript == live.transcript);
    CHECK(replay.digest == live.digest);
    CHECK(replay.debug_log == live.debug_log);
  }
}

TEST_SUITE("cli") {
  namespace {
  struct Proc {
    int code;
    std::string out;
  };
  Proc sh(const std::string& args) {
    const std::string cmd = std::string(HVSIM_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p);
    Proc r{0, {}};
    std::array<char, 4096> buf{};
    while (std::size_t n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
    const int st = pclose(p);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
  }
  }  // namespace

  TEST_CASE("usage errors exit 2") {
    CHECK(sh("").code == 2);
    CHECK(sh("run").code == 2);
    CHECK(sh("run counter_loop --bogus").code == 2);
    CHECK(sh("run counter_loop --tool gdb").code == 2);
    CHECK(sh("run counter_loop --script x --serve 127.0.0.1:0 --tool hyperdbg").code == 2);
    CHECK(sh("--help").code == 0);
  }

  TEST_CASE("runtime errors exit 1") {
    const auto r = sh("run no_such_fixture");
    CHECK(r.code == 1);
    CHECK(r.out.starts_with("error: "));
  }

  TEST_CASE("list, build and run") {
    const auto l = sh("list");
    CHECK(l.code == 0);
    for (const auto& n : g::list_fixtures()) CHECK(l.out.find(n) != std::string::npos);

    const auto native = oracle::run_native(g::build_fixture("pf_demo"));
    const auto d = sh("run pf_demo --digest-only");
    CHECK(d.code == 0);
    CHECK(d.out == to_hex(native.digest) + "\n");

    CHECK(sh("build pf_demo -o cli_pf_demo.img").code == 0);
    const auto f = sh("run cli_pf_demo.img --digest-only");
    CHECK(f.out == d.out);
    const auto t = sh("run cli_pf_demo.img --tool hyperdbg --keys 100:0xFF --max-steps 100000");
    CHECK(t.code == 0);
    CHECK(t.out.find("debug log: 34 42 45") != std::string::npos);
    std::remove("cli_pf_demo.img");
    std::remove("cli_pf_demo.img.sym");
  }
}
