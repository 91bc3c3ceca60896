#pragma once

#include <stdexcept>
#include <string>

namespace layoutdiff {

// Base class for every error thrown by the library. Subclasses exist so the
// CLI can map failure classes to distinct exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Canvas with non-positive width or height.
class InvalidCanvasError : public Error {
public:
    using Error::Error;
};

// Timestep or index outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

class InvalidArgumentError : public Error {
public:
    using Error::Error;
};

// Bad or conflicting run configuration (unknown keys, invalid values).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input data; carries the offending line when known.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& what, long line = -1)
        : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    long line() const { return line_; }

private:
    long line_;
};

// Shape or precondition mismatch between components.
class ContractError : public Error {
public:
    using Error::Error;
};

// Prompt with no extractable object descriptions.
class EmptyDescriptionSetError : public Error {
public:
    using Error::Error;
};

// LLM endpoint failure (network or unusable response).
class LlmError : public Error {
public:
    using Error::Error;
};

class MissingCheckpointError : public Error {
public:
    using Error::Error;
};

class CheckpointMismatchError : public Error {
public:
    using Error::Error;
};

// Covariance or matrix-square-root breakdown in metric computation.
class NumericalHealthError : public Error {
public:
    using Error::Error;
};

// Loss became non-finite during training.
class TrainingDivergedError : public Error {
public:
    using Error::Error;
};

// Object-addition pipeline found nothing to build a scene from.
class DegenerateSceneError : public Error {
public:
    using Error::Error;
};

}  // namespace layoutdiff
