// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_ERRORS_HPP
#define KDFS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace kdfs {

/// Base class of every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up. The message names the offending axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a precondition (non-scalar loss, tau <= 0, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid architecture or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (labels out of range, count mismatches).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A loss term or value became NaN/inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bytes that do not follow a known file layout (bad magic, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checksum mismatch on a model or checkpoint file.
class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// File written by an unsupported format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A pipeline phase was started without the artifacts it consumes.
class DependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace kdfs

#endif  // KDFS_ERRORS_HPP
