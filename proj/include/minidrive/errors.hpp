#pragma once

#include <stdexcept>
#include <string>

namespace md {

// Shape/size disagreements between operands.
struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Violated preconditions and broken internal invariants.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Token or class ids outside the known set.
struct VocabularyError : std::out_of_range {
  explicit VocabularyError(const std::string& msg) : std::out_of_range(msg) {}
};

struct ClassificationError : std::invalid_argument {
  explicit ClassificationError(const std::string& msg) : std::invalid_argument(msg) {}
};

// No feasible policy / colliding seed box.
struct PlanningError : std::runtime_error {
  explicit PlanningError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SolverError : std::runtime_error {
  explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace md
