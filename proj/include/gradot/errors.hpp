#pragma once

#include <stdexcept>
#include <string>

namespace gradot {

// Error taxonomy shared by all modules. The CLI maps each class to a
// distinct exit code (config 2, data 3, numerical 4).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Config validation problems; message lists every violated constraint.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Missing/corrupt/stale files and inconsistent datasets.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Non-finite values, divergence, iteration caps exceeded.
struct NumericalError : Error {
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

} // namespace gradot
