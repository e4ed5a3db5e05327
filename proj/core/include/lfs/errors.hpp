#pragma once

#include <stdexcept>
#include <string>

namespace lfs {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced where only finite values are legal.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// An attention mask row with no retained entry.
class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

// Cholesky pivot collapsed; the ridge system is singular.
class SingularityError : public Error {
 public:
  using Error::Error;
};

// Manifest or config failed validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Episode request cannot be satisfied by the split.
class SamplingError : public Error {
 public:
  using Error::Error;
};

// NaN gradient or loss during training.
class TrainingDivergenceError : public Error {
 public:
  using Error::Error;
};

// Checkpoint contents do not line up with the model being loaded.
class CheckpointMismatchError : public Error {
 public:
  using Error::Error;
};

// File missing, unreadable, or unparsable.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace lfs
