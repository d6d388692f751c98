#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sma {

// Violated precondition on shapes, widths, ranges. Maps to CLI exit code 4.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid or missing configuration value. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem failure (missing file, unwritable directory). Exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed bytes in an image, checkpoint or CSV file. Exit code 3.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Well-formed file with the wrong identity (bad magic, unsupported version).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data that parses but contradicts itself (mask/label disagreement, class id out of range).
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sma
