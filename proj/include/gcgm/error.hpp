#pragma once

#include <stdexcept>
#include <string>

namespace gcgm {

enum class ErrorCode {
    CycleDetected,
    Disconnected,
    ShapeMismatch,
    NumericalOverflow,
    InvalidAssignment,
    UnsupportedCount,
    ZeroMarginal,
    TooLarge,
    SingularBlock,
    DomainError,
    NonFinite,
    InvalidArgument,
    ParseError,
    IoError,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::CycleDetected: return "CycleDetected";
        case ErrorCode::Disconnected: return "Disconnected";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NumericalOverflow: return "NumericalOverflow";
        case ErrorCode::InvalidAssignment: return "InvalidAssignment";
        case ErrorCode::UnsupportedCount: return "UnsupportedCount";
        case ErrorCode::ZeroMarginal: return "ZeroMarginal";
        case ErrorCode::TooLarge: return "TooLarge";
        case ErrorCode::SingularBlock: return "SingularBlock";
        case ErrorCode::DomainError: return "DomainError";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every fatal failure in the library is reported as an `Error` carrying a code.
/// Non-fatal conditions (clamps, clipped precisions, negative reconstructions)
/// are reported through the diagnostics fields of the result types instead.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

    /// True for failures that originate in numerics rather than in input shape or IO.
    [[nodiscard]] bool is_numerical() const noexcept {
        return code_ == ErrorCode::NumericalOverflow || code_ == ErrorCode::SingularBlock ||
               code_ == ErrorCode::DomainError || code_ == ErrorCode::NonFinite ||
               code_ == ErrorCode::ZeroMarginal || code_ == ErrorCode::TooLarge;
    }

private:
    ErrorCode code_;
};

}  // namespace gcgm
