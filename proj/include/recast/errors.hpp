#pragma once

#include <stdexcept>
#include <string>

namespace recast {

/// Shape or dimension mismatch between operands.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad argument value (out-of-range label, non-binary mask, ...).
struct value_error : std::runtime_error {
    explicit value_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: divergence, non-convergence, undefined metric.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed checkpoint or config file.
struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Checkpoint/model topology disagreement.
struct topology_error : std::runtime_error {
    explicit topology_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Trainable-parameter budget exceeded.
struct budget_error : std::runtime_error {
    explicit budget_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace recast
