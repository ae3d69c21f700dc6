#include "posegraph/log.hpp"

#include <iostream>
#include <mutex>

namespace posegraph {

namespace {

std::mutex g_mutex;
WarningSink g_sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };

}  // namespace

WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_mutex);
  std::swap(g_sink, sink);
  return sink;
}

void warn(const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (g_sink) g_sink(message);
}

}  // namespace posegraph
