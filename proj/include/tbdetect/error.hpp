#pragma once

#include <stdexcept>
#include <string>

namespace tb {

// Thrown when a caller breaks a documented precondition (shape mismatch,
// invalid configuration value, misaligned inputs, ...).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown on file-level failures: missing paths, malformed manifests,
// checksum or version mismatches.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tb
