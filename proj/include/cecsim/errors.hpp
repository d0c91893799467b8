#ifndef CECSIM_ERRORS_HPP_
#define CECSIM_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace cecsim {

// Base of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InfeasibleExecutorError : public Error {
 public:
  using Error::Error;
};

class InfeasibleLinkError : public Error {
 public:
  using Error::Error;
};

class InvalidActionError : public Error {
 public:
  using Error::Error;
};

class InstanceTooLargeError : public Error {
 public:
  using Error::Error;
};

// Raised when a training loss stops being finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cecsim

#endif  // CECSIM_ERRORS_HPP_
