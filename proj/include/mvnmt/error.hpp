// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mvnmt {

/// Base of every error thrown by the library. `kind()` is a short stable tag
/// used by the CLI for its one-line machine-parsable error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MVNMT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
  };

MVNMT_DEFINE_ERROR(InvalidArgument, "invalid-argument")
MVNMT_DEFINE_ERROR(ShapeError, "shape")
MVNMT_DEFINE_ERROR(IndexError, "index")
MVNMT_DEFINE_ERROR(ContractError, "contract")
MVNMT_DEFINE_ERROR(InvalidDistribution, "invalid-distribution")
MVNMT_DEFINE_ERROR(ConfigError, "config")
MVNMT_DEFINE_ERROR(EmptyBatchError, "empty-batch")
MVNMT_DEFINE_ERROR(IntegrityError, "integrity")
MVNMT_DEFINE_ERROR(DataError, "data")
MVNMT_DEFINE_ERROR(IoError, "io")
MVNMT_DEFINE_ERROR(TrainingDiverged, "non-finite-loss")

#undef MVNMT_DEFINE_ERROR

/// Invalid argument raised when an op meets a NaN or infinite input.
class NonFiniteInput : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

}  // namespace mvnmt
