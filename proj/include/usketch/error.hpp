#pragma once

#include <stdexcept>
#include <string>

namespace usketch {

// Error taxonomy shared by all modules. The CLI maps ConfigError to exit
// code 2 and everything else to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration: bad parameter bounds, unknown keys, unknown handles.
struct ConfigError : Error {
    using Error::Error;
};

// Invalid runtime input: shape mismatches, out-of-range indices, empty data.
struct InputError : Error {
    using Error::Error;
};

// Checkpoint pairs or layouts that cannot work together.
struct IncompatibilityError : Error {
    using Error::Error;
};

// Non-finite values or impossible numeric states mid-run.
struct NumericalError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace usketch
