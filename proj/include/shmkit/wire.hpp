#pragma once

// Control-channel protocol between the master and its workers. Only names,
// indices and kernel outputs cross the channel; matrix payloads stay in
// shared memory (the copy-mode baseline is the one exception, via `load`).
//
//   frame  := len:u32le  type:u8  body        (len counts type + body)
//   str    := n:u16le  n bytes of UTF-8
//   task body (attach/run/release/gc/shutdown):
//          ns:str  x_name:str  margin:u8  n:u32le  n x index:u64le
//          kernel:str  m:u32le  m x extra_var:str
//   result := k:u32le  k x (n:u32le  n x f64le)
//   error  := message:str32 (n:u32le + bytes)
//   hello  := pid:u32le  kernel_hash:u64le
//   load   := x_name:str  nrow:u64le  ncol:u64le  nrow*ncol x f64le
//
// An extra_var is either "<name>" or "<kernel-arg>=<name>" when the shared
// variable is registered under a different name than the kernel expects.
//
// See docs/FORMATS.md for the per-type semantics.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shmkit/error.hpp"
#include "shmkit/matrix.hpp"

namespace shmkit {

enum class FrameType : std::uint8_t {
    attach = 1,
    run = 2,
    release = 3,
    gc = 4,
    shutdown = 5,
    result = 6,
    error = 7,
    hello = 8,
    load = 9,
};

inline constexpr std::size_t kMaxTaskFrameBytes = 4096;
inline constexpr std::size_t kMaxOutputBytes = std::size_t{1} << 20;
inline constexpr std::size_t kIndicesPerRunFrame = 256;
inline constexpr std::size_t kMaxFrameBytes = std::size_t{1} << 31;

struct TaskFrame {
    FrameType type = FrameType::run;

    std::string ns;
    std::string x_name;
    Margin margin = Margin::cols;
    std::vector<std::uint64_t> indices;
    std::string kernel;
    std::vector<std::string> extra_vars;

    std::vector<std::vector<double>> outputs; // result
    std::string message;                      // error
    std::uint32_t pid = 0;                    // hello
    std::uint64_t kernel_hash = 0;            // hello
    std::uint64_t nrow = 0, ncol = 0;         // load
    std::vector<double> payload;              // load

    bool is_task() const noexcept { return type >= FrameType::attach && type <= FrameType::shutdown; }

    static TaskFrame make_result(std::vector<std::vector<double>> outputs);
    static TaskFrame make_error(std::string message);
};

// Full serialized frame including the length prefix. Task frames above
// kMaxTaskFrameBytes and outputs above kMaxOutputBytes are rejected with
// Error(ProtocolError).
std::vector<std::byte> encode_frame(const TaskFrame& frame);

// Decodes type + body (the bytes after the length prefix).
TaskFrame decode_frame(std::span<const std::byte> body);

// Thrown when the peer has gone away.
class ChannelClosed : public Error {
public:
    explicit ChannelClosed(const std::string& what) : Error(ErrorCode::WorkerCrash, what) {}
};

struct ChannelStats {
    std::uint64_t frames_sent = 0;
    std::uint64_t frames_received = 0;
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
    std::uint64_t max_sent_frame = 0;
    std::uint64_t max_received_frame = 0;

    void merge(const ChannelStats& other) noexcept;
};

// Blocking, length-prefixed byte stream over a connected socket. Owns the fd.
class Channel {
public:
    Channel() = default;
    explicit Channel(int fd) noexcept : fd_(fd) {}
    ~Channel();

    Channel(const Channel&) = delete;
    Channel& operator=(const Channel&) = delete;
    Channel(Channel&& other) noexcept;
    Channel& operator=(Channel&& other) noexcept;

    void send(const TaskFrame& frame);
    // Streams a load frame straight from `values` without building it in memory.
    void send_load(const std::string& x_name, std::uint64_t nrow, std::uint64_t ncol, std::span<const double> values);
    void send_raw(std::span<const std::byte> bytes);

    TaskFrame recv();

    int fd() const noexcept { return fd_; }
    bool open() const noexcept { return fd_ >= 0; }
    void close() noexcept;

    const ChannelStats& stats() const noexcept { return stats_; }
    void reset_stats() noexcept { stats_ = {}; }

private:
    void write_all(const void* data, std::size_t len);
    void read_all(void* data, std::size_t len);

    int fd_ = -1;
    ChannelStats stats_;
};

std::pair<Channel, Channel> make_channel_pair();

struct VarBinding {
    std::string arg;      // name the kernel looks up
    std::string variable; // registered name in the namespace
};

VarBinding parse_binding(std::string_view extra_var);
std::string render_binding(std::string_view arg, std::string_view variable);

} // namespace shmkit
