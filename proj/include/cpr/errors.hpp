#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cpr {

/// Invalid parameters or inconsistent inputs detected before any compute.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/// Argument outside the domain on which an operation is defined.
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// A sampler state became NaN or infinite.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& what, std::size_t level)
        : std::runtime_error(what), level_(level) {}

    std::size_t level() const noexcept { return level_; }

private:
    std::size_t level_;
};

class RetrievalError : public std::runtime_error {
public:
    explicit RetrievalError(const std::string& what) : std::runtime_error(what) {}
};

class NotFoundError : public std::out_of_range {
public:
    explicit NotFoundError(const std::string& what) : std::out_of_range(what) {}
};

class RejectionTimeout : public std::runtime_error {
public:
    RejectionTimeout(const std::string& what, std::size_t attempts)
        : std::runtime_error(what), attempts_(attempts) {}

    std::size_t attempts() const noexcept { return attempts_; }

private:
    std::size_t attempts_;
};

}  // namespace cpr
