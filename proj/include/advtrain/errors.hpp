#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace advtrain {

// Bad configuration (unknown tags, missing required sections, invalid keys).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid data fed into an operation (labels out of range, bad ids).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse (out-of-order calls, shape mismatches between paired objects).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf encountered; carries the sample ids of the offending batch.
struct NumericError : std::runtime_error {
  NumericError(const std::string& what, std::vector<int64_t> ids)
      : std::runtime_error(what), sample_ids(std::move(ids)) {}
  std::vector<int64_t> sample_ids;
};

}  // namespace advtrain
