#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ice {

// Dense global row identity. Rows are numbered [0, N) and never renumbered.
using RowId = std::uint64_t;

using ModelVersion = std::uint32_t;

using FeatureIndex = std::uint32_t;

struct SparseEntry {
  FeatureIndex index = 0;
  double value = 0.0;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

// Sorted by index, no duplicate indices, no explicit zeros.
using SparseVector = std::vector<SparseEntry>;

using TokenList = std::vector<std::string>;

enum class Label : std::int8_t { kNegative = -1, kPositive = 1 };

inline const char* to_string(Label label) {
  return label == Label::kPositive ? "positive" : "negative";
}

Label parse_label(const std::string& text);

// Base for all domain errors so callers (HTTP layer, CLI) can map them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OutOfRange : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class Conflict : public Error {
 public:
  using Error::Error;
};

class Unavailable : public Error {
 public:
  using Error::Error;
};

}  // namespace ice
