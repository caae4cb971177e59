#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metalab {

// Bad wiring: mismatched dimensions, invalid options, unusable datasets.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation produced NaN/Inf. Carries the step index where it happened
// (gradient step for adaptation, outer step for training loops).
struct numerical_error : std::runtime_error {
    std::size_t step_index;
    numerical_error(const std::string& msg, std::size_t step)
        : std::runtime_error(msg + " (step " + std::to_string(step) + ")"), step_index(step) {}
};

// The labeling budget cannot cover the requested reveal.
struct budget_error : std::runtime_error {
    explicit budget_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file. line == 0 means the problem is not tied to a line.
struct parse_error : std::runtime_error {
    std::size_t line;
    parse_error(const std::string& msg, std::size_t line_no)
        : std::runtime_error(line_no ? msg + " (line " + std::to_string(line_no) + ")" : msg),
          line(line_no) {}
};

// Argument outside the mathematical domain of a formula.
struct domain_error : std::runtime_error {
    explicit domain_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input fails a runtime validity check (e.g. not a probability vector).
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Cosine of a zero-norm direction is undefined.
struct undefined_cosine_error : std::runtime_error {
    explicit undefined_cosine_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace metalab
