#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "hvsim/isa.hpp"
#include "hvsim/machine.hpp"

namespace hvsim::guestos {

// Physical layout shared by every paging fixture.
inline constexpr u32 kKernelDirectory = 0x1000;
inline constexpr u32 kTable0 = 0x2000;  // identity map of the low 4 MiB (first 1 MiB present)
inline constexpr u32 kProcADirectory = 0x3000;
inline constexpr u32 kProcATable = 0x4000;
inline constexpr u32 kProcBDirectory = 0x5000;
inline constexpr u32 kProcBTable = 0x6000;
inline constexpr u32 kData = 0x8000;         // counter word
inline constexpr u32 kDelayConstant = 0x8010;
inline constexpr u32 kTicks = 0x8020;
inline constexpr u32 kKernelCode = 0x10000;
inline constexpr u32 kKernelStack = 0x90000;
inline constexpr u32 kProcAVa = 0x400000;
inline constexpr u32 kProcAPa = 0x20000;
inline constexpr u32 kProcBVa = 0x800000;
inline constexpr u32 kProcBPa = 0x30000;
inline constexpr u32 kDemandVa = 0x200000;       // pf_demo / map_reserved window
inline constexpr u32 kReservedMapping = 0x00FF5003;  // map_reserved's PTE

// Toy ABI.
namespace sys {
inline constexpr u32 kWrite = 1;
inline constexpr u32 kGetPid = 2;
inline constexpr u32 kYield = 3;
inline constexpr u32 kExit = 4;
}  // namespace sys

struct Fixture {
  std::string name;
  std::string description;
  std::string source;
  isa::AssembledImage image;
  std::string symbols;          // `HEX NAME` file
  std::vector<KeyEvent> keys;   // default input schedule
  std::string expected_log;     // debug-port output of a native run
  u64 step_budget = 0;          // comfortably above the native run length
};

std::vector<std::string> list_fixtures();
/// Throws UnknownFixture.
Fixture build_fixture(std::string_view name);
/// Load the image and queue the default key schedule.
void install(Machine& m, const Fixture& f);

}  // namespace hvsim::guestos
