#pragma once

#include <stdexcept>
#include <string>

namespace tnet {

// Base for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer dimension mismatch. Messages always name the offending shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Malformed file content (IDX header, CSV cell, checkpoint container, ...).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failure (missing file, short read, write error).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Broken internal contract. The CLI maps this to exit code 2, everything
// above to exit code 1.
class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& msg) : Error(msg) {}
};

}  // namespace tnet
