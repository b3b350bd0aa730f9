// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dualrate {

// Invalid shapes, out-of-range values, malformed or unknown configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required, or a diverging run.
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failed reads/writes and corrupt or incompatible on-disk artifacts.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// An operation was invoked out of its required order (e.g. the wrong phase
// of an alternating update schedule).
struct SequenceError : std::logic_error {
    explicit SequenceError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace dualrate
