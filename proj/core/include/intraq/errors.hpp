// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace intraq {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid hyperparameters, quantizer specs or config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed caller input: wrong shapes, labels out of range, empty datasets.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate geometry (zero-norm vectors).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Two structures that must line up do not (e.g. BN stat layers).
class StructuralError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Model contains a layer the requested transformation cannot handle.
class UnsupportedLayerError : public Error {
 public:
  UnsupportedLayerError(const std::string& layer, const std::string& what)
      : Error("unsupported layer '" + layer + "': " + what), layer_(layer) {}

  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

/// Raised by the pipeline; wraps the failure of one named stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace intraq
