// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace twostage {

// Error taxonomy for the whole library. Every throw site goes through one of
// these so callers (and the CLI exit-code mapping) can dispatch on type.

// Shape or size disagreement between tensor operands.
struct dimension_error : std::invalid_argument {
    explicit dimension_error(const std::string& what) : std::invalid_argument(what) {}
};

// Numerically invalid input (zero-norm vector, empty logits, nonpositive eps).
struct domain_error : std::domain_error {
    explicit domain_error(const std::string& what) : std::domain_error(what) {}
};

// API misuse detectable from arguments alone (empty category set, bad grid).
struct argument_error : std::invalid_argument {
    explicit argument_error(const std::string& what) : std::invalid_argument(what) {}
};

// Call is valid in some state but not the current one (double attach, merge
// without adapters, optimizer step before any backward).
struct state_error : std::logic_error {
    explicit state_error(const std::string& what) : std::logic_error(what) {}
};

// Bad experiment configuration: unknown key, unparsable value, violated
// constraint. The CLI maps this (and CLI parse errors) to exit code 2.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or truncated artifact file (checkpoint, universe container).
struct format_error : std::runtime_error {
    explicit format_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace twostage
