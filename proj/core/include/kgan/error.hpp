#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace kgan {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user input: bad config, violated precondition, unknown key.
/// The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor or image shapes that do not agree.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Missing or unreadable source corpus / input directory.
class SourceError : public Error {
 public:
  using Error::Error;
};

/// On-disk schema version or config hash does not match what was expected.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Throws one ValidationError carrying every message, one per line.
inline void throw_if_any(const std::vector<std::string>& violations) {
  if (violations.empty()) return;
  std::string msg = violations.size() == 1 ? "" : std::to_string(violations.size()) + " config errors:";
  for (const auto& v : violations) msg += (msg.empty() ? "" : "\n  ") + v;
  throw ValidationError(msg);
}

}  // namespace kgan
