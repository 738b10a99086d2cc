#pragma once

#include <stdexcept>
#include <string>

namespace gemcl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public ParseError {
 public:
  using ParseError::ParseError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gemcl
