#pragma once

#include <stdexcept>
#include <string>

namespace stats {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not conform for the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// A scalar argument is outside its allowed range (temperature, margin, ...).
class ParamError : public Error {
public:
    using Error::Error;
};

// A documented API contract was violated (non-scalar backward root,
// non-deterministic function under grad_check, degenerate batch, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Malformed or truncated on-disk data.
class FormatError : public Error {
public:
    using Error::Error;
};

// Vocabulary construction or lookup failure.
class VocabError : public Error {
public:
    using Error::Error;
};

// Candidate/reference id sets do not line up.
class AlignmentError : public Error {
public:
    using Error::Error;
};

// An iterative solver failed to reach its tolerance.
class ConvergenceError : public Error {
public:
    explicit ConvergenceError(const std::string& msg, double grad_norm)
        : Error(msg), final_grad_norm(grad_norm) {}
    double final_grad_norm;
};

// Invalid run configuration (bad synth spec, bad scheme/branch combo, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace stats
