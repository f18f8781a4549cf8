#pragma once

#include <stdexcept>
#include <string>

namespace provshift {

// Error categories map onto CLI exit codes (usage = 1, data = 2, divergence = 3).
enum class ErrorCategory { kUsage, kData, kDivergence };

// All library failures carry a stable machine code ("cell-starved",
// "undefined-alpha", ...) plus a human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message,
        ErrorCategory category = ErrorCategory::kData)
      : std::runtime_error(code + ": " + message),
        code_(std::move(code)),
        category_(category) {}

  const std::string& code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_; }

 private:
  std::string code_;
  ErrorCategory category_;
};

inline Error usage_error(const std::string& message) {
  return Error("usage", message, ErrorCategory::kUsage);
}

inline Error argument_error(const std::string& message) {
  return Error("argument", message, ErrorCategory::kUsage);
}

inline Error divergence_error(const std::string& message) {
  return Error("divergence", message, ErrorCategory::kDivergence);
}

}  // namespace provshift
