#pragma once

#include <stdexcept>
#include <string>

namespace diffmark {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct RangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Operation called on an object that is not ready for it (e.g. untrained VAE).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// Caller violated an operation's precondition (e.g. a zero skipping step).
struct PreconditionError : std::logic_error {
    using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A stage input (checkpoint, dataset) is missing.
struct DependencyError : std::runtime_error {
    DependencyError(const std::string& stage, const std::string& what)
        : std::runtime_error(what), missing_stage(stage) {}
    std::string missing_stage;
};

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& what, std::string trace)
        : std::runtime_error(what), loss_trace(std::move(trace)) {}
    std::string loss_trace;
};

}  // namespace diffmark
