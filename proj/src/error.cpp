#include "coopclass/error.hpp"

#include <iostream>
#include <mutex>

namespace coopclass {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::validation: return "validation";
    case ErrorKind::lookup: return "lookup";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::coverage: return "coverage";
    case ErrorKind::exclusion: return "exclusion";
    case ErrorKind::empty_split: return "empty-split";
    case ErrorKind::incomplete: return "incomplete";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::shape: return "shape";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::policy: return "policy";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::unavailable: return "unavailable";
    case ErrorKind::dependency: return "dependency";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration: return 2;
    case ErrorKind::io: return 3;
    case ErrorKind::format: return 4;
    case ErrorKind::validation:
    case ErrorKind::shape:
    case ErrorKind::alignment: return 5;
    case ErrorKind::lookup: return 6;
    case ErrorKind::capacity:
    case ErrorKind::coverage:
    case ErrorKind::exclusion:
    case ErrorKind::empty_split:
    case ErrorKind::incomplete:
    case ErrorKind::precondition: return 7;
    case ErrorKind::divergence: return 8;
    case ErrorKind::dependency: return 9;
    case ErrorKind::policy:
    case ErrorKind::conflict:
    case ErrorKind::unavailable: return 10;
  }
  return 1;
}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

namespace {

std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}

WarningHandler& warning_handler() {
  static WarningHandler handler = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return handler;
}

}  // namespace

void set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(warning_mutex());
  warning_handler() = std::move(handler);
}

void warn(std::string_view message) {
  std::lock_guard lock(warning_mutex());
  if (warning_handler()) warning_handler()(message);
}

}  // namespace coopclass
