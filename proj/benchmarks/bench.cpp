#include <random>

#include <benchmark/benchmark.h>

#include "hvsim/error.hpp"
#include "hvsim/framework.hpp"
#include "hvsim/guestos.hpp"
#include "hvsim/isa.hpp"

using namespace hvsim;
namespace g = hvsim::guestos;

namespace {

Machine booted(const g::Fixture& fx) {
  Machine m;
  g::install(m, fx);
  m.run_until_pc(*fx.image.symbol("kmain"), fx.step_budget);
  return m;
}

// Whole native runs; items = retired instructions.
void BM_NativeRun(benchmark::State& state, const char* name) {
  const auto fx = g::build_fixture(name);
  u64 retired = 0;
  for (auto _ : state) {
    Machine m;
    g::install(m, fx);
    m.run(fx.step_budget);
    retired += m.cpu().retired;
  }
  state.SetItemsProcessed(static_cast<int64_t>(retired));
}
BENCHMARK_CAPTURE(BM_NativeRun, counter_loop, "counter_loop");
BENCHMARK_CAPTURE(BM_NativeRun, two_procs, "two_procs");

// The same runs hosted by the framework with no tool, then with a tool
// watching the timer tick and stopping at every timer interrupt.
void BM_HostedRun(benchmark::State& state, const char* name, bool instrumented) {
  const auto fx = g::build_fixture(name);
  const auto syms = SymbolTable::parse(fx.symbols);
  struct Quiet : Tool {
    EventOutcome on_event(ToolApi&, const Event&) override { return EventOutcome::PassThrough; }
  };
  u64 retired = 0;
  for (auto _ : state) {
    state.PauseTiming();
    Machine m = booted(fx);
    state.ResumeTiming();
    FrameworkConfig c;
    c.symbols = &syms;
    auto fw = Framework::load(m, c);
    Quiet t;
    ToolApi& api = fw->register_tool(t);
    if (instrumented) {
      api.subscribe(EventKind::Interrupt);
      api.subscribe(EventKind::WatchpointHit);
      api.set_watchpoint(g::kTicks, 4, WatchAccess::Write);
    }
    fw->run(fx.step_budget);
    fw->unload();
    retired += m.cpu().retired;
  }
  state.SetItemsProcessed(static_cast<int64_t>(retired));
}
BENCHMARK_CAPTURE(BM_HostedRun, two_procs_idle, "two_procs", false);
BENCHMARK_CAPTURE(BM_HostedRun, two_procs_instrumented, "two_procs", true);

void BM_Translate(benchmark::State& state) {
  const auto fx = g::build_fixture("two_procs");
  Machine m = booted(fx);
  std::mt19937 rng(7);
  std::uniform_int_distribution<u32> off(0, 0x2FFF);
  for (auto _ : state) benchmark::DoNotOptimize(m.translate(g::kKernelCode + off(rng), Access::Read, false));
}
BENCHMARK(BM_Translate);

void BM_Decode(benchmark::State& state) {
  const auto img = g::build_fixture("call_tree").image;
  std::vector<u8> code;
  for (const auto& sec : img.sections)
    if (sec.load_address == g::kKernelCode) code = sec.bytes;
  std::size_t at = 0;
  for (auto _ : state) {
    try {
      at += isa::decode(code, at).length;
    } catch (const Error&) {
      ++at;  // data between functions
    }
    if (at + 6 >= code.size()) at = 0;
  }
}
BENCHMARK(BM_Decode);

}  // namespace

BENCHMARK_MAIN();
