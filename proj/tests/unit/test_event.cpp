#include "doctest.h"
#include "hvsim/event.hpp"

using namespace hvsim;

TEST_SUITE("event") {
  TEST_CASE("kind names round-trip") {
    for (int i = 0; i < kEventKindCount; ++i) {
      const auto k = static_cast<EventKind>(i);
      CHECK(parse_event_kind(to_string(k)) == k);
    }
    CHECK_FALSE(parse_event_kind("PageFault"));
  }

  TEST_CASE("every kind carries the process") {
    for (int i = 0; i < kEventKindCount; ++i) CHECK(has_field(static_cast<EventKind>(i), Field::Process));
    CHECK_FALSE(has_field(EventKind::ProcessSwitch, Field::Address));
    CHECK(has_field(EventKind::Exception, Field::Vector));
    CHECK_FALSE(has_field(EventKind::Exception, Field::Port));
    CHECK(has_field(EventKind::IOOperationPort, Field::Port));
    CHECK(has_field(EventKind::SyscallEntry, Field::Number));
    CHECK(has_field(EventKind::WatchpointHit, Field::Access));
  }

  TEST_CASE("conditions are conjunctions of equalities") {
    Event e;
    e.kind = EventKind::IOOperationPort;
    e.process = 0x3000;
    e.port = 0x60;
    e.access = Access::Read;
    CHECK(matches({}, e));
    CHECK(matches({{Field::Port, 0x60}}, e));
    CHECK(matches({{Field::Port, 0x60}, {Field::Access, static_cast<u32>(Access::Read)}}, e));
    CHECK_FALSE(matches({{Field::Port, 0x60}, {Field::Process, 0x5000}}, e));
    CHECK(field_value(e, Field::Process) == 0x3000);
  }

  TEST_CASE("describe") {
    Event e;
    e.kind = EventKind::ProcessSwitch;
    e.previous_process = 0x3000;
    e.process = 0x5000;
    CHECK(e.describe() == "ProcessSwitch 0x3000 -> 0x5000");
    e.kind = EventKind::BreakpointHit;
    e.id = 4;
    e.address = 0x10039;
    CHECK(e.describe() == "BreakpointHit #4 at 0x10039");
    e.function = "f2";
    CHECK(e.describe() == "BreakpointHit #4 at f2");
    e.kind = EventKind::IOOperationPort;
    e.port = 0x60;
    e.value = 0x41;
    CHECK(e.describe() == "IOOperationPort 0x60 read 0x41");
  }
}
