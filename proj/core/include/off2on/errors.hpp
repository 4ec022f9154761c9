#pragma once

#include <stdexcept>
#include <string>

namespace off2on {

/// Caller broke an API precondition (dimension mismatch, action outside the
/// box, missing forward cache, ...).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Invalid or inconsistent run configuration (unknown key, bad enum value,
/// invariant violation, missing checkpoint).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced non-finite losses, targets or gradients.
class TrainingDivergence : public std::runtime_error {
public:
    explicit TrainingDivergence(const std::string& what) : std::runtime_error(what) {}
};

/// A file on disk could not be decoded. `kind()` distinguishes the failure
/// modes callers are expected to handle separately.
class DataFormatError : public std::runtime_error {
public:
    enum class Kind { CorruptHeader, DimensionMismatch, Truncated, Io };

    DataFormatError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

    const char* kind_name() const noexcept {
        switch (kind_) {
            case Kind::CorruptHeader: return "corrupt-header";
            case Kind::DimensionMismatch: return "dimension-mismatch";
            case Kind::Truncated: return "truncated";
            case Kind::Io: return "io";
        }
        return "unknown";
    }

private:
    Kind kind_;
};

}  // namespace off2on
