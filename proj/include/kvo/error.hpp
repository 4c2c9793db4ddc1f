#pragma once

#include <stdexcept>
#include <string>

namespace kvo {

// Base class for every error raised by the library. Callers that only care
// about "something failed" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Argument outside its documented domain (bad rank, out-of-range layer, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Iterative numeric routine failed to converge or produced non-finite values.
class NumericError : public Error {
public:
    using Error::Error;
};

class StorageError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

// Runtime configuration cannot serve the requested work, e.g. a reuse buffer
// too small to hold one step's selection.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Caller broke an operation's precondition (inserting into an unreserved slot,
// mapping with duplicate coverage, ...).
class ContractViolation : public Error {
public:
    using Error::Error;
};

// Malformed external input: config files, logs, artifacts.
class FormatError : public Error {
public:
    using Error::Error;
};

// A saved artifact does not belong to the model it is used with.
class MismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace kvo
