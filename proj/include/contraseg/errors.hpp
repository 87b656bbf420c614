#pragma once

#include <stdexcept>
#include <string>

namespace contraseg {

// Invalid user-supplied configuration or arguments. The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Tensor or volume shapes that do not agree.
class ShapeError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Filesystem failure (open, read, write).
class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// A file exists but its contents cannot be interpreted.
class FormatError : public std::runtime_error {
   public:
    enum class Kind { kCorrupt, kUnsupported, kInvalidDims };

    FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

   private:
    Kind kind_;
};

// Training diverged (non-finite loss).
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace contraseg
