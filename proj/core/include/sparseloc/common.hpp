#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace sparseloc {

// Shape/axis disagreements between tensors or against an op contract.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration values (indivisible extents, bad hyperparameters,
// missing config keys).
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numeric contract violations (NaN/Inf where finite values are required).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runs fn(begin, end) over disjoint chunks of [0, n), possibly on several
// threads. Each index is processed by exactly one thread and every chunk is
// iterated in increasing order, so results are bitwise independent of the
// thread count as long as fn only writes to locations owned by its indices.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

int hardware_threads();

}  // namespace sparseloc
