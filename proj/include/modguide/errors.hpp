#pragma once

#include <stdexcept>
#include <string>

namespace modguide {

/// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model, schedule, sampler or run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Scalar argument outside its documented domain (e.g. a timestep outside [0, 1]).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A value left the finite range, or an optimization diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown clause or attribute value in the toy prompt grammar.
class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed checkpoint, or a checkpoint that does not match its counterpart.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Gradient reached a parameter that must stay frozen.
class FrozennessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace modguide
