#pragma once

#include <stdexcept>
#include <string>

namespace adpmpc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dynamics or cost evaluated outside their domain (non-finite values, singularities).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Dimension mismatch or malformed input to an operation.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

class NotStabilizable : public Error {
public:
    using Error::Error;
};

/// The greedy input minimization failed at a state.
class PolicySolveError : public Error {
public:
    using Error::Error;
};

/// An error margin is outside the admissible range (c >= 1).
class MarginError : public Error {
public:
    using Error::Error;
};

class CertificationError : public Error {
public:
    using Error::Error;
};

/// Controllability constants could not be estimated (no admissible rollouts).
class EstimationError : public Error {
public:
    using Error::Error;
};

/// Initial state of an optimal control problem lies outside the state box.
class InfeasibleStart : public Error {
public:
    using Error::Error;
};

/// The performance coefficient is nonpositive for the requested horizon.
class BoundInvalid : public Error {
public:
    using Error::Error;
};

}  // namespace adpmpc
