#include "shmkit/error.hpp"

#include <cstring>

namespace shmkit {

std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::InvalidName: return "InvalidName";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::AlreadyExists: return "AlreadyExists";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::ResourceExhausted: return "ResourceExhausted";
    case ErrorCode::StillAttached: return "StillAttached";
    case ErrorCode::NotHeld: return "NotHeld";
    case ErrorCode::NotOwned: return "NotOwned";
    case ErrorCode::WorkerUnreachable: return "WorkerUnreachable";
    case ErrorCode::SpawnFailure: return "SpawnFailure";
    case ErrorCode::KernelMismatch: return "KernelMismatch";
    case ErrorCode::KernelUnknown: return "KernelUnknown";
    case ErrorCode::VarNameMismatch: return "VarNameMismatch";
    case ErrorCode::WorkerCrash: return "WorkerCrash";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::DegenerateSample: return "DegenerateSample";
    case ErrorCode::DegenerateFeature: return "DegenerateFeature";
    case ErrorCode::NoEligibleClass: return "NoEligibleClass";
    case ErrorCode::NonPositiveLength: return "NonPositiveLength";
    case ErrorCode::MissingLength: return "MissingLength";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::RaggedRows: return "RaggedRows";
    case ErrorCode::NonNumericCell: return "NonNumericCell";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::OutOfMemory: return "OutOfMemory";
    }
    return "Unknown";
}

bool error_code_from_string(std::string_view name, ErrorCode& out) noexcept
{
    for (int i = 0; i <= static_cast<int>(ErrorCode::OutOfMemory); ++i) {
        const auto code = static_cast<ErrorCode>(i);
        if (to_string(code) == name) {
            out = code;
            return true;
        }
    }
    return false;
}

void rethrow_remote(const std::string& text)
{
    const auto colon = text.find(": ");
    ErrorCode code = ErrorCode::ProtocolError;
    if (colon != std::string::npos && error_code_from_string(std::string_view(text).substr(0, colon), code))
        throw Error(code, text.substr(colon + 2));
    throw Error(ErrorCode::ProtocolError, text);
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code)
{
}

void throw_errno(ErrorCode code, const std::string& what, int err)
{
    throw Error(code, what + ": " + std::strerror(err));
}

} // namespace shmkit
