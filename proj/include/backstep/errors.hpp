#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace backstep {

/// Two grid functions that must share a grid do not.
class GridMismatch : public std::invalid_argument {
public:
    GridMismatch(std::size_t a, std::size_t b)
        : std::invalid_argument("grid mismatch: n_cells " + std::to_string(a) + " vs " + std::to_string(b)) {}
};

/// A successive-approximation series did not reach its tolerance within the term budget.
class NonConvergence : public std::runtime_error {
public:
    NonConvergence(std::string what, std::size_t terms, double last_increment)
        : std::runtime_error(what + ": no convergence after " + std::to_string(terms) +
                             " terms (last increment " + std::to_string(last_increment) + ")"),
          terms_(terms), last_increment_(last_increment) {}

    std::size_t terms() const noexcept { return terms_; }
    double last_increment() const noexcept { return last_increment_; }

private:
    std::size_t terms_;
    double last_increment_;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A file or directory could not be opened, read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Base for on-disk format problems (datasets, models).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

class KindMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace backstep
