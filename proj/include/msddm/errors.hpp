#pragma once

#include <limits>
#include <stdexcept>
#include <string>

namespace msddm {

/// Raised when an argument lies outside the domain of an operation.
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// Raised when a numerical result violates a probability bookkeeping check.
class ConsistencyError : public std::runtime_error {
public:
    explicit ConsistencyError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a threshold change absorbs all remaining probability mass.
class DegenerateModelError : public std::runtime_error {
public:
    explicit DegenerateModelError(const std::string& what) : std::runtime_error(what) {}
};

/// Quiet NaN used for quantities that are undefined (e.g. conditioning on a
/// zero-probability event).
inline constexpr double undefined() noexcept {
    return std::numeric_limits<double>::quiet_NaN();
}

inline bool is_defined(double v) noexcept { return v == v; }

} // namespace msddm
