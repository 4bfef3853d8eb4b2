#pragma once

#include <stdexcept>
#include <string>

namespace malscan {

// Shape disagreements between tensors/images; messages name both shapes.
class DimensionError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ArgumentError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Malformed or truncated binary/JSON artifacts; messages name the byte offset
// where parsing stopped.
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Image has too little structure for the requested statistic (e.g. constant
// image fed to a histogram threshold).
class DegenerateImageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace malscan
