#pragma once

#include <stdexcept>
#include <string>

namespace crania {

/// Bad configuration: unknown key, unparsable or out-of-range value.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem and file-format failures (VXL files, manifests, checkpoints).
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Violated numeric contract: shape mismatch, out-of-range index,
/// non-scalar loss, undefined metric.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crania
