#include <random>

#include <fmt/format.h>

#include "doctest.h"
#include "hvsim/error.hpp"
#include "hvsim/machine.hpp"
#include "oracle.hpp"

using namespace hvsim;
using isa::Cr;

namespace {

Machine with(std::string_view source) {
  Machine m(1u << 20);
  m.load(isa::assemble(source));
  return m;
}

// Identity map of the first 1 MiB through one table; `extra` appended to
// the setup before paging is switched on.
std::string paged(std::string_view body, std::string_view extra = "") {
  return fmt::format(R"(
    .org 0x100
      MOVI r7, 0x80000
      MOVI r1, 0x2000
      MOVI r2, 0x007
      MOVI r3, 256
  fill:
      ST [r1], r2
      ADDI r1, 4
      ADDI r2, 0x1000
      ADDI r3, -1
      JNZ fill
      MOVI r1, 0x1000
      MOVI r2, 0x2007
      ST [r1], r2
      {}
      MOVI r1, 0x1000
      MOVCR PTBR, r1
      MOVI r1, 1
      MOVCR PGEN, r1
      {}
  )",
                     extra, body);
}

}  // namespace

TEST_SUITE("machine") {
  TEST_CASE("retired advances by exactly one per retired instruction") {
    Machine m = with(R"(
      .org 0x400
        .word 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0
        .word 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0
        .word isr
      .org 0x100
        MOVI r7, 0x8000
        MOVI r1, 3
        OUT 0x40, r1
        STI
      spin:
        ADDI r1, -1
        JNZ spin
        HLT
      isr:
        IRET
    )");
    u64 retired = 0, interrupts = 0;
    while (!m.cpu().halted) {
      const u64 before = m.cpu().retired;
      const auto o = m.step();
      if (o.kind == StepOutcome::Kind::Interrupted) {
        CHECK(m.cpu().retired == before);
        ++interrupts;
      } else {
        CHECK(m.cpu().retired == before + 1);
        ++retired;
      }
    }
    CHECK(m.cpu().retired == retired);
    CHECK(interrupts > 0);
  }

  TEST_CASE("timer irq is raised iff retired is a multiple of the divisor") {
    Machine m = with(".org 0x100\nMOVI r1, 7\nOUT 0x40, r1\nloop: JMP loop\n");
    m.step();
    m.step();
    CHECK(m.timer_divisor() == 7);
    for (int i = 0; i < 100; ++i) {
      m.clear_irq(vec::kTimer);
      m.step();
      CHECK(m.irq_pending(vec::kTimer) == (m.cpu().retired % 7 == 0));
    }
  }

  TEST_CASE("arith flags and eflags image") {
    Machine m = with(".org 0x100\nMOVI r0, 1\nMOVI r1, 1\nSUB r0, r1\nADDI r0, -1\nCMP r1, r1\nHLT\n");
    m.step();
    m.step();
    m.step();
    CHECK(m.cpu().zf);
    CHECK_FALSE(m.cpu().nf);
    m.step();
    CHECK(m.cpu().nf);
    CHECK(m.cpu().flags_image() == eflags::kNegative);
    m.step();
    CHECK(m.cpu().zf);
    CHECK(m.cpu().r[1] == 1);
  }

  TEST_CASE("call/ret/push/pop use r7") {
    Machine m = with(".org 0x100\nMOVI r7, 0x1000\nMOVI r0, 9\nPUSH r0\nCALL f\nPOP r1\nHLT\nf: RET\n");
    m.run(100);
    CHECK(m.cpu().halted);
    CHECK(m.cpu().r[1] == 9);
    CHECK(m.cpu().r[7] == 0x1000);
    CHECK(m.read_phys32(0xFF8) == 0x113);  // return address of CALL at 0x10E
  }

  TEST_CASE("user mode cannot reach privileged instructions") {
    for (const char* op : {"HLT", "CLI", "STI", "IRET", "MOVCR PTBR, r0", "MOVRC r0, EPC", "IN r0, 0x60", "OUT 0xE9, r0"}) {
      Machine m = with(fmt::format(".org 0x100\n{}\n", op));
      m.cpu().mode = Mode::User;
      const CpuState before = m.cpu();
      const auto o = m.step();
      CHECK(o.kind == StepOutcome::Kind::Fault);
      CHECK(o.vector == vec::kGeneralProtection);
      CHECK(m.cpu() == before);
    }
  }

  TEST_CASE("exception entry saves context; missing handler is a double fault") {
    Machine m = with(R"(
      .org 0x420
        .word handler
      .org 0x100
        MOVI r7, 0x8000
        SYSCALL
        HLT
      handler:
        MOVRC r0, EPC
        MOVRC r1, EMODE
        BRK
    )");
    m.run(10);
    CHECK(m.cpu().halted);
    CHECK(m.cpu().r[0] == 0x107);  // SYSCALL completes before entry
    CHECK(m.cpu().r[1] == 0);
    CHECK(m.diagnostic().find("double fault") != std::string::npos);
    CHECK(m.diagnostic().find("vector 3") != std::string::npos);
  }

  TEST_CASE("translation ignores bits 3-11 and enforces U/W") {
    Machine m = with(paged("HLT"));
    m.run(10000);
    REQUIRE(m.cpu().paging());
    // Flood the ignored bits on one leaf: translation must not change.
    const u32 slot = 0x2000 + 0x50 * 4;
    const u32 orig = m.read_phys32(slot);
    const auto t0 = m.translate(0x50123, Access::Write, true);
    m.write_phys32(slot, orig | 0xFF8);
    const auto t1 = m.translate(0x50123, Access::Write, true);
    CHECK(t0.ok);
    CHECK(t1.ok);
    CHECK(t1.physical == t0.physical);
    CHECK(t1.physical == 0x50123);
    CHECK((m.read_phys32(slot) & 0xFF8) == 0xFF8);  // preserved

    m.write_phys32(slot, (orig & ~pte::kUser));
    auto t = m.translate(0x50000, Access::Read, true);
    CHECK_FALSE(t.ok);
    CHECK(t.error_code == (pf::kUser | pf::kProtection));
    CHECK(m.translate(0x50000, Access::Read, false).ok);
    m.write_phys32(slot, (orig & ~pte::kWritable));
    t = m.translate(0x50000, Access::Write, false);
    CHECK(t.error_code == (pf::kWrite | pf::kProtection));
    m.write_phys32(slot, 0);
    t = m.translate(0x50000, Access::Execute, false);
    CHECK(t.error_code == pf::kExecute);
    CHECK_FALSE(m.translate(0x100000, Access::Read, false).ok);  // beyond the 256 mapped pages
  }

  TEST_CASE("translate agrees with the reference walker") {
    Machine m = with(paged("HLT"));
    m.run(10000);
    std::mt19937 rng(3);
    for (int i = 0; i < 2000; ++i) {
      const u32 va = rng() % 0x200000;
      const auto t = m.translate(va, Access::Read, false);
      const auto ref = oracle::reference_walk(m, m.cpu().control(Cr::Ptbr), va);
      CHECK(t.ok == ref.has_value());
      if (t.ok) CHECK(t.physical == *ref);
    }
  }

  TEST_CASE("faults leave architectural state unchanged") {
    Machine m = with(paged("MOVI r1, 0x100000\nST [r1], r0\nHLT"));
    while (m.cpu().pc != 0 && !m.cpu().halted) {
      const CpuState before = m.cpu();
      const auto o = m.step();
      if (o.kind == StepOutcome::Kind::Fault) {
        CHECK(o.vector == vec::kPageFault);
        CHECK(o.fault_address == 0x100000);
        CHECK(o.error_code == pf::kWrite);
        CHECK(m.cpu() == before);
        break;
      }
    }
  }

  TEST_CASE("framebuffer is bit-faithful device memory") {
    Machine m = with(".org 0x100\nMOVI r1, 0xB8000\nMOVI r0, 0x07410741\nST [r1+3996], r0\nLD r2, [r1+3996]\nHLT\n");
    m.run(10);
    CHECK(m.cpu().r[2] == 0x07410741);
    const auto fb = m.framebuffer();
    CHECK(fb.size() == kFramebufferBytes);
    CHECK(fb[3996] == 0x41);
    CHECK(fb[3999] == 0x07);
    CHECK(m.read_phys(kFramebufferBase + 3996, 4) == std::vector<u8>{0x41, 0x07, 0x41, 0x07});
  }

  TEST_CASE("keyboard fifo, status port and irq") {
    Machine m = with(".org 0x100\nIN r0, 0x64\nIN r1, 0x60\nIN r2, 0x60\nIN r3, 0x64\nIN r4, 0x60\nHLT\n");
    m.schedule_key(0, 'a');
    m.schedule_key(0, 'b');
    m.step();
    CHECK(m.cpu().r[0] == 1);
    CHECK(m.irq_pending(vec::kKeyboard));
    m.step();
    CHECK(m.irq_pending(vec::kKeyboard));  // still one queued
    m.step();
    CHECK_FALSE(m.irq_pending(vec::kKeyboard));
    m.run(10);
    CHECK(m.cpu().r[1] == 'a');
    CHECK(m.cpu().r[2] == 'b');
    CHECK(m.cpu().r[3] == 0);
    CHECK(m.cpu().r[4] == 0);
  }

  TEST_CASE("scheduled keys arrive at their retired count") {
    Machine m = with(".org 0x100\nloop: JMP loop\n");
    m.schedule_key(5, 'z');
    m.run_until_retired(4);
    m.step();  // retired 4 -> 5; drain happens at the start of a step
    CHECK(m.keyboard_fifo().empty());
    m.step();
    CHECK(m.keyboard_fifo().size() == 1);
  }

  TEST_CASE("debug port and digest") {
    Machine a = with(".org 0x100\nMOVI r0, 0x41\nOUT 0xE9, r0\nHLT\n");
    Machine b = with(".org 0x100\nMOVI r0, 0x41\nOUT 0xE9, r0\nHLT\n");
    CHECK(a.digest() == b.digest());
    a.run();
    CHECK(a.debug_log() == std::vector<u8>{0x41});
    CHECK(a.digest() != b.digest());
    b.run();
    CHECK(a.digest() == b.digest());
    std::vector<u8> ram = a.read_phys(0x100, 1);
    ram[0] ^= 1;
    const std::vector<PhysPatch> overlay{{0x100, ram}};
    CHECK(a.digest(overlay) != a.digest());
    CHECK(to_hex(a.digest()).size() == 64);
  }

  TEST_CASE("physical bounds") {
    Machine m(1u << 16);
    CHECK_THROWS_AS(m.read_phys(0xFFFF, 2), Error);
    CHECK_THROWS_AS(m.write_phys32(0x10000, 1), Error);
  }

  TEST_CASE("footprint lists fetch and data accesses") {
    Machine m = with(".org 0x100\nMOVI r7, 0x1000\nPUSH r0\nHLT\n");
    m.step();
    const auto fp = m.footprint();
    REQUIRE(fp.size() == 2);
    CHECK(fp[0].access == Access::Execute);
    CHECK(fp[0].address == 0x106);
    CHECK(fp[1].access == Access::Write);
    CHECK(fp[1].address == 0xFFC);
    CHECK(fp[1].length == 4);
  }
}
