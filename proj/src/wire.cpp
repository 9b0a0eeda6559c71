#include "shmkit/wire.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <limits>

#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

namespace shmkit {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }
    void u16(std::uint16_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f64(double v)
    {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        le(bits);
    }
    void str(const std::string& s)
    {
        if (s.size() > std::numeric_limits<std::uint16_t>::max())
            throw Error(ErrorCode::ProtocolError, "identifier too long for the wire");
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void str32(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void bytes(const void* p, std::size_t n)
    {
        const auto* b = static_cast<const std::byte*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    std::vector<std::byte>& buffer() { return out_; }

private:
    template <typename T>
    void le(T v)
    {
        for (std::size_t i = 0; i < sizeof(T); ++i)
            out_.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
    std::vector<std::byte> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::byte> in) : in_(in) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64()
    {
        const auto bits = le(8);
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    std::string str() { return take_string(u16()); }
    std::string str32() { return take_string(u32()); }
    void doubles(std::vector<double>& out, std::uint64_t n)
    {
        need(n, sizeof(double));
        out.resize(n);
        std::memcpy(out.data(), in_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
    }
    void need(std::uint64_t count, std::size_t width) const
    {
        if (count > (in_.size() - pos_) / width) throw Error(ErrorCode::ProtocolError, "frame truncated");
    }
    bool done() const noexcept { return pos_ == in_.size(); }

private:
    std::uint64_t le(std::size_t n)
    {
        need(n, 1);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= std::to_integer<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }
    std::string take_string(std::size_t n)
    {
        need(n, 1);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::span<const std::byte> in_;
    std::size_t pos_ = 0;
};

void put_length(std::vector<std::byte>& buf)
{
    const auto len = buf.size() - 4;
    if (len > kMaxFrameBytes) throw Error(ErrorCode::ProtocolError, "frame exceeds maximum size");
    for (std::size_t i = 0; i < 4; ++i) buf[i] = static_cast<std::byte>((len >> (8 * i)) & 0xFF);
}

} // namespace

TaskFrame TaskFrame::make_result(std::vector<std::vector<double>> outputs)
{
    TaskFrame f;
    f.type = FrameType::result;
    f.outputs = std::move(outputs);
    return f;
}

TaskFrame TaskFrame::make_error(std::string message)
{
    TaskFrame f;
    f.type = FrameType::error;
    f.message = std::move(message);
    return f;
}

std::vector<std::byte> encode_frame(const TaskFrame& frame)
{
    Writer w;
    w.u32(0);
    w.u8(static_cast<std::uint8_t>(frame.type));
    switch (frame.type) {
    case FrameType::attach:
    case FrameType::run:
    case FrameType::release:
    case FrameType::gc:
    case FrameType::shutdown:
        w.str(frame.ns);
        w.str(frame.x_name);
        w.u8(static_cast<std::uint8_t>(frame.margin));
        w.u32(static_cast<std::uint32_t>(frame.indices.size()));
        for (auto i : frame.indices) w.u64(i);
        w.str(frame.kernel);
        w.u32(static_cast<std::uint32_t>(frame.extra_vars.size()));
        for (const auto& v : frame.extra_vars) w.str(v);
        if (w.buffer().size() >= kMaxTaskFrameBytes)
            throw Error(ErrorCode::ProtocolError, "task frame of " + std::to_string(w.buffer().size()) +
                                                      " bytes exceeds the 4096-byte control limit");
        break;
    case FrameType::result:
        w.u32(static_cast<std::uint32_t>(frame.outputs.size()));
        for (const auto& out : frame.outputs) {
            if (out.size() * sizeof(double) > kMaxOutputBytes)
                throw Error(ErrorCode::ProtocolError, "kernel output exceeds the 1 MiB cap");
            w.u32(static_cast<std::uint32_t>(out.size()));
            for (double v : out) w.f64(v);
        }
        break;
    case FrameType::error:
        w.str32(frame.message);
        break;
    case FrameType::hello:
        w.u32(frame.pid);
        w.u64(frame.kernel_hash);
        break;
    case FrameType::load:
        w.str(frame.x_name);
        w.u64(frame.nrow);
        w.u64(frame.ncol);
        if (frame.payload.size() != frame.nrow * frame.ncol)
            throw Error(ErrorCode::ProtocolError, "load payload does not match its dimensions");
        for (double v : frame.payload) w.f64(v);
        break;
    default:
        throw Error(ErrorCode::ProtocolError, "unknown frame type");
    }
    put_length(w.buffer());
    return std::move(w.buffer());
}

TaskFrame decode_frame(std::span<const std::byte> body)
{
    Reader r(body);
    TaskFrame f;
    const auto type = r.u8();
    if (type < 1 || type > 9) throw Error(ErrorCode::ProtocolError, "unknown frame type " + std::to_string(type));
    f.type = static_cast<FrameType>(type);
    switch (f.type) {
    case FrameType::attach:
    case FrameType::run:
    case FrameType::release:
    case FrameType::gc:
    case FrameType::shutdown: {
        f.ns = r.str();
        f.x_name = r.str();
        const auto margin = r.u8();
        if (margin < 1 || margin > 3) throw Error(ErrorCode::ProtocolError, "bad margin " + std::to_string(margin));
        f.margin = static_cast<Margin>(margin);
        const auto n = r.u32();
        r.need(n, 8);
        f.indices.resize(n);
        for (auto& i : f.indices) i = r.u64();
        f.kernel = r.str();
        const auto m = r.u32();
        r.need(m, 2);
        for (std::uint32_t k = 0; k < m; ++k) f.extra_vars.push_back(r.str());
        break;
    }
    case FrameType::result: {
        const auto k = r.u32();
        r.need(k, 4);
        f.outputs.resize(k);
        for (auto& out : f.outputs) r.doubles(out, r.u32());
        break;
    }
    case FrameType::error:
        f.message = r.str32();
        break;
    case FrameType::hello:
        f.pid = r.u32();
        f.kernel_hash = r.u64();
        break;
    case FrameType::load:
        f.x_name = r.str();
        f.nrow = r.u64();
        f.ncol = r.u64();
        if (f.ncol != 0 && f.nrow > std::numeric_limits<std::uint64_t>::max() / f.ncol)
            throw Error(ErrorCode::ProtocolError, "load dimensions overflow");
        r.doubles(f.payload, f.nrow * f.ncol);
        break;
    default:
        break;
    }
    if (!r.done()) throw Error(ErrorCode::ProtocolError, "trailing bytes in frame");
    return f;
}

void ChannelStats::merge(const ChannelStats& other) noexcept
{
    frames_sent += other.frames_sent;
    frames_received += other.frames_received;
    bytes_sent += other.bytes_sent;
    bytes_received += other.bytes_received;
    max_sent_frame = std::max(max_sent_frame, other.max_sent_frame);
    max_received_frame = std::max(max_received_frame, other.max_received_frame);
}

// ---------------------------------------------------------------------------

Channel::~Channel() { close(); }

Channel::Channel(Channel&& other) noexcept : fd_(std::exchange(other.fd_, -1)), stats_(other.stats_) {}

Channel& Channel::operator=(Channel&& other) noexcept
{
    if (this != &other) {
        close();
        fd_ = std::exchange(other.fd_, -1);
        stats_ = other.stats_;
    }
    return *this;
}

void Channel::close() noexcept
{
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Channel::write_all(const void* data, std::size_t len)
{
    const auto* p = static_cast<const char*>(data);
    while (len > 0) {
        const auto n = ::send(fd_, p, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            if (errno == EPIPE || errno == ECONNRESET) throw ChannelClosed("peer closed the channel");
            throw_errno(ErrorCode::ProtocolError, "send", errno);
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
}

void Channel::read_all(void* data, std::size_t len)
{
    auto* p = static_cast<char*>(data);
    while (len > 0) {
        const auto n = ::recv(fd_, p, len, 0);
        if (n == 0) throw ChannelClosed("peer closed the channel");
        if (n < 0) {
            if (errno == EINTR) continue;
            if (errno == ECONNRESET) throw ChannelClosed("peer reset the channel");
            throw_errno(ErrorCode::ProtocolError, "recv", errno);
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
}

void Channel::send_raw(std::span<const std::byte> bytes)
{
    if (fd_ < 0) throw ChannelClosed("channel is closed");
    write_all(bytes.data(), bytes.size());
    ++stats_.frames_sent;
    stats_.bytes_sent += bytes.size();
    stats_.max_sent_frame = std::max<std::uint64_t>(stats_.max_sent_frame, bytes.size());
}

void Channel::send(const TaskFrame& frame) { send_raw(encode_frame(frame)); }

void Channel::send_load(const std::string& x_name, std::uint64_t nrow, std::uint64_t ncol,
                        std::span<const double> values)
{
    if (values.size() != nrow * ncol) throw Error(ErrorCode::ProtocolError, "load payload does not match dims");
    TaskFrame head;
    head.type = FrameType::load;
    head.x_name = x_name;
    auto prefix = encode_frame(head); // empty payload, patched below
    const std::uint64_t total = prefix.size() - 4 + values.size_bytes();
    if (total > kMaxFrameBytes) throw Error(ErrorCode::ProtocolError, "load frame exceeds maximum size");
    for (std::size_t i = 0; i < 4; ++i) prefix[i] = static_cast<std::byte>((total >> (8 * i)) & 0xFF);
    // nrow/ncol are the last 16 bytes of the header part.
    for (std::size_t i = 0; i < 8; ++i) {
        prefix[prefix.size() - 16 + i] = static_cast<std::byte>((nrow >> (8 * i)) & 0xFF);
        prefix[prefix.size() - 8 + i] = static_cast<std::byte>((ncol >> (8 * i)) & 0xFF);
    }
    if (fd_ < 0) throw ChannelClosed("channel is closed");
    write_all(prefix.data(), prefix.size());
    write_all(values.data(), values.size_bytes());
    ++stats_.frames_sent;
    stats_.bytes_sent += prefix.size() + values.size_bytes();
    stats_.max_sent_frame = std::max<std::uint64_t>(stats_.max_sent_frame, prefix.size() + values.size_bytes());
}

TaskFrame Channel::recv()
{
    if (fd_ < 0) throw ChannelClosed("channel is closed");
    std::byte prefix[4];
    read_all(prefix, 4);
    std::uint64_t len = 0;
    for (std::size_t i = 0; i < 4; ++i) len |= std::to_integer<std::uint64_t>(prefix[i]) << (8 * i);
    if (len == 0 || len > kMaxFrameBytes) throw Error(ErrorCode::ProtocolError, "bad frame length");
    std::vector<std::byte> body(len);
    read_all(body.data(), len);
    ++stats_.frames_received;
    stats_.bytes_received += len + 4;
    stats_.max_received_frame = std::max<std::uint64_t>(stats_.max_received_frame, len + 4);
    return decode_frame(body);
}

std::pair<Channel, Channel> make_channel_pair()
{
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0)
        throw_errno(ErrorCode::SpawnFailure, "socketpair", errno);
    return {Channel(fds[0]), Channel(fds[1])};
}

} // namespace shmkit

namespace shmkit {

VarBinding parse_binding(std::string_view extra_var)
{
    const auto eq = extra_var.find('=');
    if (eq == std::string_view::npos) return {std::string(extra_var), std::string(extra_var)};
    return {std::string(extra_var.substr(0, eq)), std::string(extra_var.substr(eq + 1))};
}

std::string render_binding(std::string_view arg, std::string_view variable)
{
    if (arg == variable) return std::string(arg);
    return std::string(arg) + "=" + std::string(variable);
}

} // namespace shmkit
