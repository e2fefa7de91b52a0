#pragma once

#include <stdexcept>
#include <string>

namespace jemlab {

// Base for everything thrown by the library.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor/graph shape or dtype incompatibility.
class ShapeError : public Error {
  public:
    explicit ShapeError(const std::string& what) : Error(what) {}
};

// Bad argument values (labels out of range, invalid config values, ...).
class ValueError : public Error {
  public:
    explicit ValueError(const std::string& what) : Error(what) {}
};

// File format / filesystem problems.
class IoError : public Error {
  public:
    explicit IoError(const std::string& what) : Error(what) {}
};

// Non-finite loss/gradient/energy detected. Carries the step index where the
// run blew up so diagnostics can point at it.
class DivergenceError : public Error {
  public:
    DivergenceError(const std::string& reason, long step)
        : Error("divergence at step " + std::to_string(step) + ": " + reason),
          reason_(reason),
          step_(step) {}

    const std::string& reason() const { return reason_; }
    long step() const { return step_; }

  private:
    std::string reason_;
    long step_;
};

}  // namespace jemlab
