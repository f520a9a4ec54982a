#pragma once

#include <stdexcept>
#include <string>

namespace dp {

// Invalid configuration (bad dimensions, ranges, schema violations).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Tensor shape or range violation at an operation boundary.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Scene generation could not produce an unambiguous caption.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error("generation error: " + msg) {}
};

// Dataset file problems. Each failure mode is distinguishable by kind.
struct DatasetError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, Io };
    Kind kind;
    DatasetError(Kind k, const std::string& msg)
        : std::runtime_error("dataset error: " + msg), kind(k) {}
};

// Checkpoint file problems.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint error: " + msg) {}
};

// A pipeline stage was invoked before its upstream stage produced a checkpoint.
struct DependencyError : std::runtime_error {
    explicit DependencyError(const std::string& msg) : std::runtime_error("dependency error: " + msg) {}
};

// Artifacts from mismatched configs or upstream checkpoints were combined.
struct ProvenanceError : std::runtime_error {
    explicit ProvenanceError(const std::string& msg) : std::runtime_error("provenance error: " + msg) {}
};

// Training diverged (NaN loss).
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};

}  // namespace dp
