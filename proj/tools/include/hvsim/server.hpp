#pragma once

#include <chrono>
#include <functional>
#include <string>

#include "hvsim/session.hpp"

namespace hvsim::server {

inline constexpr std::chrono::milliseconds kHeartbeat{200};  // >= 4 Hz

std::string base64(std::span<const u8> bytes);
std::vector<u8> unbase64(std::string_view text);

struct ServeOptions {
  /// Called once listening, with the bound port (useful with port 0).
  std::function<void(unsigned short)> on_listening;
  /// Guest steps per scheduling slice while running.
  u64 slice = 2000;
};

/// Serve one client over newline-delimited JSON until it disconnects.
/// Throws BindFailure.
session::RunReport serve(const session::RunConfig& config, ServeOptions options = {});

}  // namespace hvsim::server
