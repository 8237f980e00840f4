#include "hvsim/guestos.hpp"

#include <array>
#include <functional>

#include <fmt/format.h>

#include "hvsim/error.hpp"
#include "hvsim/osdep.hpp"

namespace hvsim::guestos {

namespace {

constexpr u32 kKinfo = kinfo::kAddress;
constexpr u32 kKernelDesc = 0x0F40;
constexpr u32 kProcADesc = 0x0F80;
constexpr u32 kProcBDesc = 0x0FC0;
// Saved context lives after the osdep-visible fields.
constexpr u32 kCtxSp = 40;
constexpr u32 kCtxEpc = 44;
constexpr u32 kCtxEflags = 48;
constexpr u32 kCtxEmode = 52;

struct Options {
  bool user_processes = false;
  std::vector<std::pair<int, std::string>> vectors;  // vector -> handler label
};

std::string h(u32 v) { return fmt::format("0x{:X}", v); }

// Descriptor: pid, name[16], ptbr, state, stack, heap, next, then context.
std::string descriptor(u32 at, u32 pid, std::string_view name, u32 ptbr, u32 state, u32 stack, u32 heap, u32 next,
                       u32 sp = 0, u32 epc = 0, u32 eflags = 0, u32 emode = 0) {
  std::string s = fmt::format(".org {}\n.word {}\n.org {}\n.ascii \"{}\"\n", h(at), pid, h(at + kinfo::kName), name);
  s += fmt::format(".org {}\n.word {}, {}, {}, {}, {}\n", h(at + kinfo::kPtbr), h(ptbr), state, h(stack), h(heap), h(next));
  if (sp) s += fmt::format(".word {}, {}, {}, {}\n", h(sp), h(epc), h(eflags), emode);
  return s;
}

// Boot code, page tables, IVT and the kinfo block. Boot fills table0, turns
// paging on and calls kmain with r6 = 0 (end of the frame chain).
std::string prelude(const Options& o) {
  std::string s = fmt::format(R"(; ---- boot
.org {reset}
boot:
  MOVI r7, {stack}
  MOVI r6, 0
  MOVI r0, {t0}
  MOVI r1, 0x3
  MOVI r2, 256
boot_fill:
  ST [r0], r1
  ADDI r0, 4
  ADDI r1, 0x1000
  ADDI r2, -1
  JNZ boot_fill
  MOVI r0, {kdir}
  MOVCR PTBR, r0
  MOVI r0, 1
  MOVCR PGEN, r0
  CALL kmain
  HLT

; ---- kernel directory
.org {kdir}
.word {kdir_e0}
)",
                              fmt::arg("reset", h(kResetPc)), fmt::arg("stack", h(kKernelStack)), fmt::arg("t0", h(kTable0)),
                              fmt::arg("kdir", h(kKernelDirectory)), fmt::arg("kdir_e0", h(kTable0 | 0x3)));

  for (const auto& [v, label] : o.vectors) s += fmt::format(".org {}\n.word {}\n", h(kResetIvt + 4 * v), label);

  const u32 head = kKernelDesc;
  s += "\n; ---- kernel info block\n";
  s += fmt::format(".org {}\n.word {}, {}, {}\n", h(kKinfo), h(kinfo::kMagic), h(head), h(kKernelDesc));
  const u32 kernel_next = o.user_processes ? kProcADesc : 0;
  s += descriptor(kKernelDesc, 0, "kernel", kKernelDirectory, 1, kKernelStack, kData, kernel_next);

  if (o.user_processes) {
    // Each process starts with seven zero words on its stack for the
    // scheduler's register pops, and with IF set in user mode.
    const u32 a_stack = kProcAVa + 0x2000, b_stack = kProcBVa + 0x2000;
    s += descriptor(kProcADesc, 1, "procA", kProcADirectory, 0, a_stack, kProcAVa + 0x2000, kProcBDesc, a_stack - 28,
                    kProcAVa, eflags::kInterrupt, 1);
    s += descriptor(kProcBDesc, 2, "procB", kProcBDirectory, 0, b_stack, kProcBVa + 0x2000, 0, b_stack - 28, kProcBVa,
                    eflags::kInterrupt, 1);
    constexpr u32 user = pte::kPresent | pte::kWritable | pte::kUser;
    s += fmt::format(".org {}\n.word {}\n.org {}\n.word {}\n", h(kProcADirectory), h(kTable0 | 0x3),
                     h(kProcADirectory + (kProcAVa >> 22) * 4), h(kProcATable | user));
    s += fmt::format(".org {}\n.word {}, {}, {}\n", h(kProcATable), h(kProcAPa | user), h((kProcAPa + 0x1000) | user),
                     h((kProcAPa + 0x2000) | user));
    s += fmt::format(".org {}\n.word {}\n.org {}\n.word {}\n", h(kProcBDirectory), h(kTable0 | 0x3),
                     h(kProcBDirectory + (kProcBVa >> 22) * 4), h(kProcBTable | user));
    s += fmt::format(".org {}\n.word {}, {}, {}\n", h(kProcBTable), h(kProcBPa | user), h((kProcBPa + 0x1000) | user),
                     h((kProcBPa + 0x2000) | user));
  }
  return s;
}

std::string prologue(std::string_view name) {
  return fmt::format("{}:\n  PUSH r6\n  MOV r6, r7\n", name);
}
constexpr std::string_view kEpilogue = "  MOV r7, r6\n  POP r6\n  RET\n";

// r5 is ISR scratch by convention: the keyboard ISR starts with IN r5, 0x60.
constexpr std::string_view kQuietKeyboardIsr = R"(kbd_isr:
  IN r5, 0x60
  IRET
)";

std::string ticking_timer_isr() {
  return fmt::format(R"(timer_isr:
  PUSH r4
  MOVI r5, {ticks}
  LD r4, [r5]
  ADDI r4, 1
  ST [r5], r4
  POP r4
  IRET
)",
                     fmt::arg("ticks", h(kTicks)));
}

std::string code_org() { return fmt::format("\n; ---- kernel\n.org {}\n", h(kKernelCode)); }

// ---------------------------------------------------------------------------

Fixture boot_min() {
  Fixture f;
  f.description = "three-instruction program: writes 01 to the debug port and halts";
  f.source = ".org 0x100\nboot:\n  MOVI r0, 1\n  OUT 0xE9, r0\n  HLT\n.global boot\n";
  f.expected_log = std::string(1, '\x01');
  f.step_budget = 100;
  return f;
}

constexpr u32 kCounterDelay = 1000;

Fixture counter_loop() {
  Fixture f;
  f.description = "increments the counter word 7 times with delay loops, then halts";
  Options o;
  o.vectors = {{vec::kTimer, "timer_isr"}, {vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o);
  f.source += fmt::format(".org {}\n.word {}\n", h(kDelayConstant), kCounterDelay);
  f.source += code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  STI
  MOVI r4, 7
count_loop:
  MOVI r1, {data}
  LD r0, [r1]
  ADDI r0, 1
  ST [r1], r0
  LD r2, [r1+0x10]
count_delay:
  ADDI r2, -1
  JNZ count_delay
  ADDI r4, -1
  JNZ count_loop
  MOVI r1, {data}
  LD r0, [r1]
  OUT 0xE9, r0
)",
                          fmt::arg("data", h(kData)));
  f.source += kEpilogue;
  f.source += ticking_timer_isr();
  f.source += kQuietKeyboardIsr;
  f.source += ".global boot, kmain, timer_isr, kbd_isr\n";
  f.expected_log = std::string(1, '\x07');
  f.step_budget = 100'000;
  return f;
}

Fixture call_tree() {
  Fixture f;
  f.description = "kmain calls f1 five times; f1 calls f2, which bumps the counter";
  Options o;
  o.vectors = {{vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  STI
  MOVI r4, 5
kmain_loop:
  CALL f1
  ADDI r4, -1
  JNZ kmain_loop
  MOVI r1, {data}
  LD r0, [r1]
  OUT 0xE9, r0
)",
                          fmt::arg("data", h(kData)));
  f.source += kEpilogue;
  f.source += prologue("f1");
  f.source += "  CALL f2\n";
  f.source += kEpilogue;
  f.source += prologue("f2");
  f.source += fmt::format("  MOVI r1, {}\n  LD r0, [r1]\n  ADDI r0, 1\n  ST [r1], r0\n", h(kData));
  f.source += kEpilogue;
  f.source += kQuietKeyboardIsr;
  f.source += ".global boot, kmain, f1, f2, kbd_isr\n";
  f.expected_log = std::string(1, '\x05');
  f.step_budget = 10'000;
  return f;
}

Fixture recursion() {
  Fixture f;
  f.description = "kmain prints fact(3) computed recursively";
  Options o;
  o.vectors = {{vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += "  MOVI r1, 3\n  CALL fact\n  OUT 0xE9, r0\n";
  f.source += kEpilogue;
  // fact(r1) -> r0; no multiply instruction, so n * fact(n-1) is a loop.
  f.source += prologue("fact");
  f.source += R"(  PUSH r1
  MOVI r0, 1
  CMP r1, r0
  JZ fact_base
  MOVI r0, 0
  CMP r1, r0
  JZ fact_base
  ADDI r1, -1
  CALL fact
  LD r1, [r6-4]
  MOVI r2, 0
fact_mul:
  ADD r2, r0
  ADDI r1, -1
  JNZ fact_mul
  MOV r0, r2
  JMP fact_out
fact_base:
  MOVI r0, 1
fact_out:
)";
  f.source += kEpilogue;
  f.source += kQuietKeyboardIsr;
  f.source += ".global boot, kmain, fact, kbd_isr\n";
  f.expected_log = std::string(1, '\x06');
  f.step_budget = 10'000;
  return f;
}

constexpr u32 kSliceDivisor = 200;
constexpr u32 kUserDelay = 150;

std::string user_program(std::string_view label, u32 va, u32 pa, char letter) {
  return fmt::format(R"(
.org {va}, {pa}
{l}_main:
  MOVI r0, 2
  SYSCALL
  MOVI r1, {heap}
  ST [r1], r0
  MOVI r3, 3
{l}_loop:
  MOVI r0, 1
  MOVI r1, '{c}'
  SYSCALL
  MOVI r2, {delay}
{l}_delay:
  ADDI r2, -1
  JNZ {l}_delay
  ADDI r3, -1
  JNZ {l}_loop
  MOVI r0, 4
  SYSCALL
{l}_spin:
  JMP {l}_spin
)",
                     fmt::arg("va", h(va)), fmt::arg("pa", h(pa)), fmt::arg("l", label),
                     fmt::arg("heap", h(va + 0x2000)), fmt::arg("c", letter), fmt::arg("delay", kUserDelay));
}

Fixture two_procs() {
  Fixture f;
  f.description = "timer-driven round-robin between procA and procB; each prints its letter 3 times";
  Options o;
  o.user_processes = true;
  o.vectors = {{vec::kSyscall, "syscall_gate"}, {vec::kTimer, "timer_isr"}, {vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  MOVI r0, {div}
  OUT 0x40, r0
  STI
kmain_idle:
  JMP kmain_idle
)",
                          fmt::arg("div", kSliceDivisor));

  f.source += fmt::format(R"(
syscall_gate:
  MOVI r5, 1
  CMP r0, r5
  JZ sys_write
  MOVI r5, 2
  CMP r0, r5
  JZ sys_getpid
  MOVI r5, 4
  CMP r0, r5
  JZ sys_exit
  MOVI r0, 0
  IRET
sys_write:
  OUT 0xE9, r1
  MOVI r0, 0
  IRET
sys_getpid:
  MOVI r5, {cur}
  LD r5, [r5]
  LD r0, [r5]
  IRET
sys_exit:
  MOVI r5, {cur}
  LD r5, [r5]
  MOVI r0, 2
  ST [r5+{state}], r0
  MOVI r0, 0
  IRET

timer_isr:
  PUSH r0
  PUSH r1
  PUSH r2
  PUSH r3
  PUSH r4
  PUSH r5
  PUSH r6
  MOVI r1, {cur}
  LD r2, [r1]
  ST [r2+{sp}], r7
  MOVRC r0, EPC
  ST [r2+{epc}], r0
  MOVRC r0, EFLAGS
  ST [r2+{efl}], r0
  MOVRC r0, EMODE
  ST [r2+{emode}], r0
  LD r0, [r2+{state}]
  MOVI r3, 1
  CMP r0, r3
  JNZ sched_pick
  MOVI r0, 0
  ST [r2+{state}], r0
sched_pick:
  MOV r3, r2
  MOVI r4, 3
sched_next:
  LD r3, [r3+{next}]
  MOVI r0, 0
  CMP r3, r0
  JNZ sched_have
  MOVI r3, {head}
  LD r3, [r3]
sched_have:
  LD r0, [r3]
  MOVI r5, 0
  CMP r0, r5
  JZ sched_skip
  LD r0, [r3+{state}]
  MOVI r5, 2
  CMP r0, r5
  JNZ sched_found
sched_skip:
  ADDI r4, -1
  JNZ sched_next
  MOVI r0, {kdir}
  MOVCR PTBR, r0
  MOVI r0, {kdesc}
  ST [r1], r0
  HLT
sched_found:
  MOVI r0, 1
  ST [r3+{state}], r0
  ST [r1], r3
  LD r0, [r3+{ptbr}]
  MOVCR PTBR, r0
  LD r7, [r3+{sp}]
  LD r0, [r3+{epc}]
  MOVCR EPC, r0
  LD r0, [r3+{efl}]
  MOVCR EFLAGS, r0
  LD r0, [r3+{emode}]
  MOVCR EMODE, r0
  POP r6
  POP r5
  POP r4
  POP r3
  POP r2
  POP r1
  POP r0
  IRET
)",
                          fmt::arg("cur", h(kKinfo + kinfo::kCurrentOffset)), fmt::arg("head", h(kKinfo + kinfo::kListHeadOffset)),
                          fmt::arg("state", kinfo::kState), fmt::arg("next", kinfo::kNext), fmt::arg("ptbr", kinfo::kPtbr),
                          fmt::arg("sp", kCtxSp), fmt::arg("epc", kCtxEpc), fmt::arg("efl", kCtxEflags),
                          fmt::arg("emode", kCtxEmode), fmt::arg("kdir", h(kKernelDirectory)),
                          fmt::arg("kdesc", h(kKernelDesc)));
  f.source += kQuietKeyboardIsr;
  f.source += user_program("procA", kProcAVa, kProcAPa, 'A');
  f.source += user_program("procB", kProcBVa, kProcBPa, 'B');
  f.source += ".global boot, kmain, syscall_gate, timer_isr, kbd_isr, procA_main, procB_main\n";
  f.expected_log = "ABABAB";
  f.step_budget = 100'000;
  return f;
}

constexpr u32 kEchoFlag = 0x8000;
constexpr u32 kEchoCursor = 0x8004;

Fixture kbd_echo() {
  Fixture f;
  f.description = "echoes keyboard scancodes into the framebuffer; Enter (0x0A) halts";
  Options o;
  o.vectors = {{vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  STI
kmain_idle:
  MOVI r1, {flag}
  LD r0, [r1]
  MOVI r2, 0
  CMP r0, r2
  JZ kmain_idle
)",
                          fmt::arg("flag", h(kEchoFlag)));
  f.source += kEpilogue;
  f.source += fmt::format(R"(
kbd_isr:
  IN r5, 0x60
  PUSH r0
  PUSH r1
  PUSH r2
  MOVI r0, 0
  CMP r5, r0
  JZ kbd_done
  MOVI r0, 0x0A
  CMP r5, r0
  JNZ kbd_echo
  MOVI r1, {flag}
  MOVI r0, 1
  ST [r1], r0
  JMP kbd_done
kbd_echo:
  MOVI r1, {cursor}
  LD r0, [r1]
  MOVI r2, {fb}
  ADD r2, r0
  MOVI r1, 0x0700
  OR r1, r5
  ST [r2], r1
  ADDI r0, 2
  MOVI r2, {wrap}
  CMP r0, r2
  JNZ kbd_store
  MOVI r0, 0
kbd_store:
  MOVI r1, {cursor}
  ST [r1], r0
kbd_done:
  POP r2
  POP r1
  POP r0
  IRET
)",
                          fmt::arg("flag", h(kEchoFlag)), fmt::arg("cursor", h(kEchoCursor)),
                          fmt::arg("fb", h(kFramebufferBase)), fmt::arg("wrap", h(kFramebufferBytes - 4)));
  f.source += ".global boot, kmain, kbd_isr\n";
  f.keys = {{1000, 'h'}, {2000, 'i'}, {2500, 0}, {3000, '!'}, {4000, 0x0A}};
  f.step_budget = 20'000;
  return f;
}

Fixture pf_demo() {
  Fixture f;
  f.description = "touches an unmapped page, maps it on demand in its page-fault handler, then executes BRK";
  Options o;
  o.vectors = {{vec::kBreakpoint, "brk_isr"}, {vec::kPageFault, "pf_isr"}, {vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  MOVI r1, {va}
  MOVI r0, 0x1234
  ST [r1], r0
  LD r2, [r1]
  OUT 0xE9, r2
  BRK
  MOVI r0, 'E'
  OUT 0xE9, r0
)",
                          fmt::arg("va", h(kDemandVa)));
  f.source += kEpilogue;
  f.source += fmt::format(R"(
pf_isr:
  PUSH r0
  PUSH r1
  MOVI r1, {slot}
  MOVI r0, 0x40003
  ST [r1], r0
  POP r1
  POP r0
  IRET

brk_isr:
  PUSH r0
  MOVI r0, 'B'
  OUT 0xE9, r0
  POP r0
  IRET
)",
                          fmt::arg("slot", h(kTable0 + (kDemandVa >> 12 & 0x3FF) * 4)));
  f.source += kQuietKeyboardIsr;
  f.source += ".global boot, kmain, pf_isr, brk_isr, kbd_isr\n";
  f.expected_log = "\x34" "BE";
  f.step_budget = 10'000;
  return f;
}

Fixture map_reserved() {
  Fixture f;
  f.description = "kernel maps a high (reserved) frame at 0x200000 and round-trips data through it";
  Options o;
  o.vectors = {{vec::kKeyboard, "kbd_isr"}};
  f.source = prelude(o) + code_org();
  f.source += prologue("kmain");
  f.source += fmt::format(R"(  MOVI r1, {slot}
  MOVI r0, {pte}
  ST [r1], r0
  LD r2, [r1]
  MOVI r3, {data}
  ST [r3], r2
  MOVI r1, {va}
  MOVI r0, 0xCAFEBABE
  ST [r1], r0
  LD r2, [r1]
  ST [r3+4], r2
  OUT 0xE9, r2
)",
                          fmt::arg("slot", h(kTable0 + (kDemandVa >> 12 & 0x3FF) * 4)),
                          fmt::arg("pte", h(kReservedMapping)), fmt::arg("data", h(kData)), fmt::arg("va", h(kDemandVa)));
  f.source += kEpilogue;
  f.source += kQuietKeyboardIsr;
  f.source += ".global boot, kmain, kbd_isr\n";
  f.expected_log = "\xBE";
  f.step_budget = 10'000;
  return f;
}

using Builder = Fixture (*)();
constexpr std::array<std::pair<std::string_view, Builder>, 8> kFixtures = {{
    {"boot_min", boot_min},
    {"counter_loop", counter_loop},
    {"call_tree", call_tree},
    {"recursion", recursion},
    {"two_procs", two_procs},
    {"kbd_echo", kbd_echo},
    {"pf_demo", pf_demo},
    {"map_reserved", map_reserved},
}};

}  // namespace

std::vector<std::string> list_fixtures() {
  std::vector<std::string> out;
  for (const auto& [name, _] : kFixtures) out.emplace_back(name);
  return out;
}

Fixture build_fixture(std::string_view name) {
  for (const auto& [n, build] : kFixtures) {
    if (n != name) continue;
    Fixture f = build();
    f.name = std::string(n);
    f.image = isa::assemble(f.source);
    f.symbols = isa::symbols_file(f.image);
    return f;
  }
  throw Error(Errc::UnknownFixture, std::string(name));
}

void install(Machine& m, const Fixture& f) {
  m.load(f.image);
  for (const auto& k : f.keys) m.schedule_key(k.at_retired, k.scancode);
}

}  // namespace hvsim::guestos
