#include "shmkit/segment.hpp"

#include <atomic>
#include <bit>
#include <cerrno>
#include <cstring>
#include <filesystem>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

namespace shmkit {

static_assert(std::endian::native == std::endian::little,
              "the meta header is little-endian and updated in place with native atomics");

namespace {

constexpr std::size_t kMaxIdentifier = 64;
constexpr std::size_t kMaxRendered = 200;
constexpr std::string_view kPrefix = "ms.";

bool is_ident_char(char c) noexcept
{
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

std::string_view kind_suffix(SegmentKind kind) noexcept { return kind == SegmentKind::data ? "data" : "meta"; }

std::string os_name(const SegmentName& name) { return "/" + name.render(); }

template <typename T>
void put_le(std::byte* out, T value) noexcept
{
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out[i] = static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
}

template <typename T>
T get_le(const std::byte* in) noexcept
{
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(in[i])) << (8 * i);
    return static_cast<T>(v);
}

std::uint64_t magic_word() noexcept
{
    std::uint64_t w;
    std::memcpy(&w, kMetaMagic.data(), sizeof(w));
    return w;
}

} // namespace

SegmentName::SegmentName(std::string ns, std::string variable, SegmentKind kind)
    : ns_(std::move(ns)), variable_(std::move(variable)), kind_(kind)
{
    if (!valid_identifier(ns_))
        throw Error(ErrorCode::InvalidName, "namespace '" + ns_ + "' must match [A-Za-z0-9_]{1,64}");
    if (!valid_variable(variable_))
        throw Error(ErrorCode::InvalidName, "variable '" + variable_ + "' must match [A-Za-z0-9_]{1,64}");
    if (render().size() > kMaxRendered) throw Error(ErrorCode::InvalidName, "rendered segment name too long");
}

bool SegmentName::valid_identifier(std::string_view s) noexcept
{
    if (s.empty() || s.size() > kMaxIdentifier) return false;
    for (char c : s)
        if (!is_ident_char(c)) return false;
    return true;
}

bool SegmentName::valid_variable(std::string_view s) noexcept
{
    const auto dot = s.find('.');
    if (dot == std::string_view::npos) return valid_identifier(s);
    const auto index = s.substr(dot + 1);
    if (index.empty() || index.size() > 20) return false;
    for (char c : index)
        if (c < '0' || c > '9') return false;
    return valid_identifier(s.substr(0, dot));
}

std::string SegmentName::render() const
{
    std::string out(kPrefix);
    out += ns_;
    out += '.';
    out += variable_;
    out += '.';
    out += kind_suffix(kind_);
    return out;
}

std::optional<SegmentName> SegmentName::parse(std::string_view rendered)
{
    if (!rendered.starts_with(kPrefix)) return std::nullopt;
    rendered.remove_prefix(kPrefix.size());
    const auto first = rendered.find('.');
    const auto last = rendered.rfind('.');
    if (first == std::string_view::npos || first == last) return std::nullopt;
    const auto suffix = rendered.substr(last + 1);
    SegmentKind kind;
    if (suffix == "data")
        kind = SegmentKind::data;
    else if (suffix == "meta")
        kind = SegmentKind::meta;
    else
        return std::nullopt;
    const auto ns = rendered.substr(0, first);
    const auto var = rendered.substr(first + 1, last - first - 1);
    if (!valid_identifier(ns) || !valid_variable(var)) return std::nullopt;
    return SegmentName(std::string(ns), std::string(var), kind);
}

std::array<std::byte, kMetaHeaderBytes> serialize_meta(const VariableMeta& meta) noexcept
{
    std::array<std::byte, kMetaHeaderBytes> out{};
    std::memcpy(out.data(), meta.magic.data(), 8);
    put_le<std::uint32_t>(out.data() + 8, meta.version);
    put_le<std::uint32_t>(out.data() + 12, meta.type_tag);
    put_le<std::uint64_t>(out.data() + 16, meta.nrow);
    put_le<std::uint64_t>(out.data() + 24, meta.ncol);
    put_le<std::uint64_t>(out.data() + 32, meta.attach_count);
    put_le<std::uint64_t>(out.data() + 40, meta.flags);
    return out;
}

VariableMeta parse_meta(std::span<const std::byte> bytes)
{
    if (bytes.size() < kMetaHeaderBytes) throw Error(ErrorCode::TruncatedFile, "meta header shorter than 48 bytes");
    VariableMeta meta;
    std::memcpy(meta.magic.data(), bytes.data(), 8);
    if (meta.magic != kMetaMagic) throw Error(ErrorCode::BadMagic, "meta header magic is not MEMSHARE");
    meta.version = get_le<std::uint32_t>(bytes.data() + 8);
    meta.type_tag = get_le<std::uint32_t>(bytes.data() + 12);
    meta.nrow = get_le<std::uint64_t>(bytes.data() + 16);
    meta.ncol = get_le<std::uint64_t>(bytes.data() + 24);
    meta.attach_count = get_le<std::uint64_t>(bytes.data() + 32);
    meta.flags = get_le<std::uint64_t>(bytes.data() + 40);
    if (meta.version != kMetaVersion)
        throw Error(ErrorCode::BadMagic, "unsupported meta version " + std::to_string(meta.version));
    if (meta.type_tag != 1 && meta.type_tag != 2)
        throw Error(ErrorCode::BadMagic, "unknown type tag " + std::to_string(meta.type_tag));
    return meta;
}

// ---------------------------------------------------------------------------

MappedRegion::MappedRegion(SegmentName name, void* addr, std::uint64_t byte_len, RegionRole role) noexcept
    : name_(std::move(name)), addr_(addr), byte_len_(byte_len), role_(role)
{
}

MappedRegion::~MappedRegion() { unmap(); }

MappedRegion::MappedRegion(MappedRegion&& other) noexcept
    : name_(std::move(other.name_)), addr_(std::exchange(other.addr_, nullptr)),
      byte_len_(std::exchange(other.byte_len_, 0)), role_(other.role_)
{
}

MappedRegion& MappedRegion::operator=(MappedRegion&& other) noexcept
{
    if (this != &other) {
        unmap();
        name_ = std::move(other.name_);
        addr_ = std::exchange(other.addr_, nullptr);
        byte_len_ = std::exchange(other.byte_len_, 0);
        role_ = other.role_;
    }
    return *this;
}

void MappedRegion::unmap() noexcept
{
    if (addr_ != nullptr) {
        ::munmap(addr_, byte_len_);
        addr_ = nullptr;
    }
}

MappedRegion create_segment(const SegmentName& name, std::uint64_t byte_len)
{
    if (byte_len == 0) throw Error(ErrorCode::InvalidArgument, "segment byte length must be positive");
    const auto path = os_name(name);
    const int fd = ::shm_open(path.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd < 0) {
        const int err = errno;
        if (err == EEXIST) throw Error(ErrorCode::AlreadyExists, "segment " + name.render() + " already exists");
        if (err == EINVAL || err == ENAMETOOLONG) throw_errno(ErrorCode::InvalidName, "shm_open " + path, err);
        throw_errno(ErrorCode::ResourceExhausted, "shm_open " + path, err);
    }
    auto fail = [&](const char* what, int err) {
        ::close(fd);
        ::shm_unlink(path.c_str());
        throw_errno(ErrorCode::ResourceExhausted, std::string(what) + " " + path, err);
    };
    if (::ftruncate(fd, static_cast<off_t>(byte_len)) != 0) fail("ftruncate", errno);
    // Reserve the backing pages now so exhaustion surfaces here instead of as
    // SIGBUS on first write.
    if (const int err = ::posix_fallocate(fd, 0, static_cast<off_t>(byte_len)); err != 0 && err != EOPNOTSUPP)
        fail("posix_fallocate", err);
    void* addr = ::mmap(nullptr, byte_len, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (addr == MAP_FAILED) fail("mmap", errno);
    ::close(fd);
    return MappedRegion(name, addr, byte_len, RegionRole::owner);
}

MappedRegion attach_segment(const SegmentName& name)
{
    const auto path = os_name(name);
    const int fd = ::shm_open(path.c_str(), O_RDWR, 0600);
    if (fd < 0) {
        const int err = errno;
        if (err == ENOENT) throw Error(ErrorCode::NotFound, "no segment named " + name.render());
        throw_errno(ErrorCode::NotFound, "shm_open " + path, err);
    }
    struct stat st{};
    if (::fstat(fd, &st) != 0 || st.st_size <= 0) {
        ::close(fd);
        // Size zero means the creator has not sized it yet.
        throw Error(ErrorCode::NotFound, "segment " + name.render() + " is not initialized");
    }
    const auto len = static_cast<std::uint64_t>(st.st_size);
    void* addr = ::mmap(nullptr, len, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    const int err = errno;
    ::close(fd);
    if (addr == MAP_FAILED) throw_errno(ErrorCode::ResourceExhausted, "mmap " + path, err);
    return MappedRegion(name, addr, len, RegionRole::attacher);
}

void destroy_segment(MappedRegion&& region, std::uint64_t attach_count)
{
    if (attach_count > 0)
        throw Error(ErrorCode::StillAttached, region.name().render() + " still has " +
                                                  std::to_string(attach_count) + " attachment(s)");
    MappedRegion doomed = std::move(region);
    unlink_segment(doomed.name());
    doomed.unmap();
}

bool unlink_segment(const SegmentName& name) noexcept
{
    return ::shm_unlink(os_name(name).c_str()) == 0;
}

bool segment_exists(const SegmentName& name) noexcept
{
    const int fd = ::shm_open(os_name(name).c_str(), O_RDONLY, 0);
    if (fd < 0) return false;
    ::close(fd);
    return true;
}

std::vector<SegmentName> list_segments(std::optional<std::string_view> ns)
{
    std::vector<SegmentName> out;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator("/dev/shm", ec)) {
        auto parsed = SegmentName::parse(entry.path().filename().string());
        if (!parsed) continue;
        if (ns && parsed->ns() != *ns) continue;
        out.push_back(std::move(*parsed));
    }
    return out;
}

// ---------------------------------------------------------------------------

MetaBlock::MetaBlock(MappedRegion& region) : base_(region.bytes().data())
{
    if (region.byte_len() < kMetaSegmentBytes)
        throw Error(ErrorCode::BadMagic, "meta segment " + region.name().render() + " is too small");
}

void MetaBlock::publish(const VariableMeta& meta) noexcept
{
    const auto bytes = serialize_meta(meta);
    std::memcpy(base_ + 8, bytes.data() + 8, kMetaHeaderBytes - 8);
    std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_)).store(magic_word(),
                                                                                   std::memory_order_release);
}

bool MetaBlock::published() const noexcept
{
    return std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_)).load(std::memory_order_acquire) ==
           magic_word();
}

VariableMeta MetaBlock::read() const
{
    if (!published()) throw Error(ErrorCode::BadMagic, "meta header not published");
    auto meta = parse_meta(std::span<const std::byte>(base_, kMetaHeaderBytes));
    meta.attach_count = attach_count();
    return meta;
}

std::uint64_t MetaBlock::attach_count() const noexcept
{
    return std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_ + kMetaOffsetAttachCount))
        .load(std::memory_order_acquire);
}

bool MetaBlock::try_acquire() noexcept
{
    std::atomic_ref<std::uint64_t> count(*reinterpret_cast<std::uint64_t*>(base_ + kMetaOffsetAttachCount));
    auto current = count.load(std::memory_order_acquire);
    while (current > 0) {
        if (count.compare_exchange_weak(current, current + 1, std::memory_order_acq_rel)) return true;
    }
    return false;
}

std::uint64_t MetaBlock::release() noexcept
{
    std::atomic_ref<std::uint64_t> count(*reinterpret_cast<std::uint64_t*>(base_ + kMetaOffsetAttachCount));
    return count.fetch_sub(1, std::memory_order_acq_rel) - 1;
}

void MetaBlock::set_attach_count(std::uint64_t value) noexcept
{
    std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_ + kMetaOffsetAttachCount))
        .store(value, std::memory_order_release);
}

namespace {

// Slot word: low 32 bits pid, bits 32..39 role; zero means free.
std::uint64_t slot_word(std::uint32_t pid, MetaBlock::SlotRole role) noexcept
{
    return static_cast<std::uint64_t>(pid) | (static_cast<std::uint64_t>(role) << 32);
}

} // namespace

bool MetaBlock::claim_slot(std::uint32_t pid, SlotRole role) noexcept
{
    const auto word = slot_word(pid, role);
    for (std::size_t i = 0; i < kPidTableSlots; ++i) {
        std::atomic_ref<std::uint64_t> slot(*reinterpret_cast<std::uint64_t*>(base_ + kPidTableOffset + 8 * i));
        std::uint64_t expected = 0;
        if (slot.compare_exchange_strong(expected, word, std::memory_order_acq_rel)) return true;
    }
    return false;
}

bool MetaBlock::clear_slot(std::uint32_t pid, SlotRole role) noexcept
{
    const auto word = slot_word(pid, role);
    for (std::size_t i = 0; i < kPidTableSlots; ++i) {
        std::atomic_ref<std::uint64_t> slot(*reinterpret_cast<std::uint64_t*>(base_ + kPidTableOffset + 8 * i));
        std::uint64_t expected = word;
        if (slot.compare_exchange_strong(expected, 0, std::memory_order_acq_rel)) return true;
    }
    return false;
}

std::vector<MetaBlock::PidSlot> MetaBlock::slots() const
{
    std::vector<PidSlot> out;
    for (std::size_t i = 0; i < kPidTableSlots; ++i) {
        const auto word =
            std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(base_ + kPidTableOffset + 8 * i))
                .load(std::memory_order_acquire);
        if (word == 0) continue;
        out.push_back({static_cast<std::uint32_t>(word & 0xFFFFFFFFu), static_cast<SlotRole>(word >> 32)});
    }
    return out;
}

} // namespace shmkit
