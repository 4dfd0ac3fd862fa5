#pragma once

#include <stdexcept>
#include <string>

namespace dsdf {

/// Base class for all library errors. `category()` yields a short
/// machine-readable tag used by the CLI when reporting failures.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct InputError : Error {
    explicit InputError(const std::string& what) : Error("input", what) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& what) : Error("parse", what) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

struct CoverageError : Error {
    explicit CoverageError(const std::string& what) : Error("coverage", what) {}
};

struct InvariantError : Error {
    explicit InvariantError(const std::string& what) : Error("invariant", what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

/// Zero-norm weight rows, zero likelihoods and similar degeneracies.
struct DegenerateError : Error {
    explicit DegenerateError(const std::string& what) : Error("degenerate", what) {}
};

struct CheckpointError : Error {
    CheckpointError(std::string category, const std::string& what)
        : Error(std::move(category), what) {}
};

struct VersionError : CheckpointError {
    explicit VersionError(const std::string& what) : CheckpointError("version", what) {}
};

struct TruncatedBlobError : CheckpointError {
    explicit TruncatedBlobError(const std::string& what)
        : CheckpointError("truncated", what) {}
};

struct ManifestError : CheckpointError {
    explicit ManifestError(const std::string& what) : CheckpointError("manifest", what) {}
};

/// Bad command lines / unknown formats. The CLI maps this to exit code 2.
struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};

} // namespace dsdf
