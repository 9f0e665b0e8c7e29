#pragma once

#include <stdexcept>
#include <string>

namespace prol {

// Precondition/contract violations: caller bugs, not recoverable conditions.
class contract_error : public std::logic_error {
public:
    explicit contract_error(const std::string& what) : std::logic_error(what) {}
};

// File and serialization failures.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// A sample (or task stream) was requested a second time within one run.
class seen_once_error : public std::runtime_error {
public:
    explicit seen_once_error(const std::string& what) : std::runtime_error(what) {}
};

// Training produced a non-finite loss.
class training_diverged : public std::runtime_error {
public:
    explicit training_diverged(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace prol
