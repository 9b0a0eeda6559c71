#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace shmkit {

enum class ErrorCode {
    InvalidName,
    InvalidArgument,
    AlreadyExists,
    NotFound,
    ResourceExhausted,
    StillAttached,
    NotHeld,
    NotOwned,
    WorkerUnreachable,
    SpawnFailure,
    KernelMismatch,
    KernelUnknown,
    VarNameMismatch,
    WorkerCrash,
    ProtocolError,
    DomainError,
    DegenerateSample,
    DegenerateFeature,
    NoEligibleClass,
    NonPositiveLength,
    MissingLength,
    LengthMismatch,
    BadMagic,
    TruncatedFile,
    IoFailure,
    RaggedRows,
    NonNumericCell,
    EmptyFile,
    OutOfMemory,
};

std::string_view to_string(ErrorCode code) noexcept;

// Inverse of to_string; used to carry codes across the worker channel.
bool error_code_from_string(std::string_view name, ErrorCode& out) noexcept;

// Rebuilds an Error from "<Code>: message" text, ProtocolError if unparseable.
[[noreturn]] void rethrow_remote(const std::string& text);

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void throw_errno(ErrorCode code, const std::string& what, int err);

} // namespace shmkit
