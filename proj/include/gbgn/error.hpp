#pragma once

#include <stdexcept>
#include <string>

namespace gbgn {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A documented precondition was violated (bad shapes, out-of-range labels, ...).
struct ContractViolation : Error {
    using Error::Error;
};

// A primitive or gradient produced a NaN/Inf.
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration (unknown weighter kind, bad network config, ...).
struct ConfigError : Error {
    using Error::Error;
};

// A loss target contributes no pixels (empty mask, all-sentinel labels).
struct DegenerateTarget : Error {
    using Error::Error;
};

// Iterative solver did not reach tolerance; carries the last residual.
struct SolverFailure : Error {
    double residual;
    SolverFailure(const std::string& msg, double res) : Error(msg), residual(res) {}
};

// Filesystem / serialization failure.
struct IoError : Error {
    using Error::Error;
};

} // namespace gbgn
