#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace coopclass {

/// Versioned header line carried by every text artifact.
inline constexpr std::string_view kFileHeader = "#coopclass-v1";

enum class ErrorKind {
  format,         // malformed file contents
  validation,     // value out of range
  lookup,         // unknown id
  capacity,       // not enough items to satisfy a request
  configuration,  // invalid option combination
  precondition,
  coverage,       // sample without annotations
  exclusion,      // annotator fails the per-class label minimum
  empty_split,
  incomplete,     // onboarding session missing labels
  divergence,     // non-finite loss or gradient
  shape,          // dimension mismatch
  alignment,      // label streams not aligned
  policy,         // rejected user asked to cooperate
  conflict,       // wrong session phase
  unavailable,    // service artifacts missing
  dependency,     // downstream artifact requested before upstream
  io,
};

std::string_view to_string(ErrorKind kind);

/// Process exit code for the CLI. 0 is reserved for success.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

// Non-fatal diagnostics (degenerate clusters, excluded annotators, ...).
// Default handler writes to stderr.
using WarningHandler = std::function<void(std::string_view)>;
void set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

}  // namespace coopclass
