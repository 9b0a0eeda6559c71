#pragma once

// Named POSIX shared-memory segments. Every shared variable is a pair of
// segments: a data segment holding the column-major doubles and a fixed
// 4096-byte meta segment whose first 48 bytes are the VariableMeta header.
// The byte layout is documented in docs/FORMATS.md.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shmkit/error.hpp"
#include "shmkit/matrix.hpp"

namespace shmkit {

enum class SegmentKind { data, meta };

class SegmentName {
public:
    // Throws Error(InvalidName) unless `ns` matches [A-Za-z0-9_]{1,64} and
    // `variable` matches the same rule, optionally followed by ".<digits>"
    // (the element suffix used for flattened lists).
    SegmentName(std::string ns, std::string variable, SegmentKind kind);

    const std::string& ns() const noexcept { return ns_; }
    const std::string& variable() const noexcept { return variable_; }
    SegmentKind kind() const noexcept { return kind_; }

    SegmentName with_kind(SegmentKind kind) const { return SegmentName(ns_, variable_, kind); }

    // "ms.<namespace>.<variable>.<kind>"
    std::string render() const;

    // Inverse of render(); nullopt for names that are not ours.
    static std::optional<SegmentName> parse(std::string_view rendered);

    static bool valid_identifier(std::string_view s) noexcept;
    static bool valid_variable(std::string_view s) noexcept;

    friend bool operator==(const SegmentName&, const SegmentName&) = default;

private:
    std::string ns_;
    std::string variable_;
    SegmentKind kind_;
};

inline constexpr std::size_t kMetaSegmentBytes = 4096;
inline constexpr std::size_t kMetaHeaderBytes = 48;
inline constexpr std::uint32_t kMetaVersion = 1;
inline constexpr std::array<char, 8> kMetaMagic = {'M', 'E', 'M', 'S', 'H', 'A', 'R', 'E'};

// Offsets inside the meta segment.
inline constexpr std::size_t kMetaOffsetAttachCount = 32;
inline constexpr std::size_t kPidTableOffset = 64;
inline constexpr std::size_t kPidTableSlots = 64;

struct VariableMeta {
    std::array<char, 8> magic = kMetaMagic;
    std::uint32_t version = kMetaVersion;
    std::uint32_t type_tag = static_cast<std::uint32_t>(ValueKind::vector);
    std::uint64_t nrow = 0;
    std::uint64_t ncol = 1;
    std::uint64_t attach_count = 0;
    std::uint64_t flags = 0;

    ValueKind kind() const noexcept { return static_cast<ValueKind>(type_tag); }
    std::uint64_t element_count() const noexcept { return nrow * ncol; }
    std::uint64_t payload_bytes() const noexcept { return nrow * ncol * sizeof(double); }

    friend bool operator==(const VariableMeta&, const VariableMeta&) = default;
};

std::array<std::byte, kMetaHeaderBytes> serialize_meta(const VariableMeta& meta) noexcept;

// Throws Error(BadMagic) for a wrong magic, unsupported version or type tag,
// and Error(TruncatedFile) when fewer than 48 bytes are supplied.
VariableMeta parse_meta(std::span<const std::byte> bytes);

enum class RegionRole { owner, attacher };

// A mapping of one named segment into this process. Unmapped on destruction;
// the OS name is only released by destroy_segment / unlink_segment.
class MappedRegion {
public:
    MappedRegion() = default;
    MappedRegion(SegmentName name, void* addr, std::uint64_t byte_len, RegionRole role) noexcept;
    ~MappedRegion();

    MappedRegion(const MappedRegion&) = delete;
    MappedRegion& operator=(const MappedRegion&) = delete;
    MappedRegion(MappedRegion&& other) noexcept;
    MappedRegion& operator=(MappedRegion&& other) noexcept;

    const SegmentName& name() const { return *name_; }
    std::uint64_t byte_len() const noexcept { return byte_len_; }
    RegionRole role() const noexcept { return role_; }
    bool mapped() const noexcept { return addr_ != nullptr; }

    std::span<std::byte> bytes() noexcept { return {static_cast<std::byte*>(addr_), byte_len_}; }
    std::span<const std::byte> bytes() const noexcept { return {static_cast<const std::byte*>(addr_), byte_len_}; }
    std::span<double> doubles() noexcept { return {static_cast<double*>(addr_), byte_len_ / sizeof(double)}; }
    std::span<const double> doubles() const noexcept
    {
        return {static_cast<const double*>(addr_), byte_len_ / sizeof(double)};
    }

    void unmap() noexcept;

private:
    std::optional<SegmentName> name_;
    void* addr_ = nullptr;
    std::uint64_t byte_len_ = 0;
    RegionRole role_ = RegionRole::attacher;
};

// Exclusive creation. Errors: AlreadyExists, ResourceExhausted, InvalidArgument.
MappedRegion create_segment(const SegmentName& name, std::uint64_t byte_len);

// Errors: NotFound.
MappedRegion attach_segment(const SegmentName& name);

// Releases the OS name and unmaps. Throws StillAttached when attach_count > 0;
// the region is left untouched in that case.
void destroy_segment(MappedRegion&& region, std::uint64_t attach_count);

// Raw name removal; returns false if the name did not exist.
bool unlink_segment(const SegmentName& name) noexcept;

bool segment_exists(const SegmentName& name) noexcept;

// All rendered names of our segments currently present on this host,
// optionally restricted to one namespace.
std::vector<SegmentName> list_segments(std::optional<std::string_view> ns = std::nullopt);

// Typed accessor over a mapped meta segment. The attach count and the PID
// table are updated with atomic read-modify-write operations on the mapping;
// every other field is written once before the magic is published.
class MetaBlock {
public:
    enum class SlotRole : std::uint32_t { owner = 1, view = 2 };

    struct PidSlot {
        std::uint32_t pid = 0;
        SlotRole role = SlotRole::owner;
    };

    explicit MetaBlock(MappedRegion& region);

    // Writes every field except the magic, then publishes the magic with
    // release ordering so attachers never observe a partial header.
    void publish(const VariableMeta& meta) noexcept;

    bool published() const noexcept;

    // Throws BadMagic if not published.
    VariableMeta read() const;

    std::uint64_t attach_count() const noexcept;

    // Increments unless the count is already zero (a dying variable never
    // revives). Returns false on zero.
    bool try_acquire() noexcept;

    // Decrements and returns the new count.
    std::uint64_t release() noexcept;

    void set_attach_count(std::uint64_t value) noexcept;

    // Claims one free slot; false if the table is full (the variable is then
    // never considered for orphan sweeping).
    bool claim_slot(std::uint32_t pid, SlotRole role) noexcept;
    // Clears one slot holding (pid, role); false if none matched.
    bool clear_slot(std::uint32_t pid, SlotRole role) noexcept;
    std::vector<PidSlot> slots() const;

private:
    std::byte* base_;
};

} // namespace shmkit
