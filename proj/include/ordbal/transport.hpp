// SPDX-License-Identifier: Apache-2.0
//
// Message layer between workers and the order server.
//
// Frame layout (all integers and floats little-endian):
//
//   u32 length            covers the type byte and the payload
//   u8  type              Hello=0x01 Grad=0x02 AvgGrad=0x03 Perm=0x04 Done=0x05
//   payload
//     Hello    u16 worker_id, u32 n, u32 d [, u64 config_hash]
//     Grad     u32 epoch, u32 step, u16 worker_id, u32 d, d x f64
//     AvgGrad  u32 epoch, u32 step, u32 d, d x f64
//     Perm     u32 epoch, u16 worker_id, u32 n, n x u32
//     Done     (empty)
//
// Frames longer than kMaxFrameLength are rejected.

#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ordbal/coordinator.hpp"
#include "ordbal/core.hpp"

namespace ordbal {

inline constexpr std::size_t kMaxFrameLength = std::size_t{64} << 20;

struct HelloMsg {
  std::uint16_t worker_id = 0;
  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::optional<std::uint64_t> config_hash;

  friend bool operator==(const HelloMsg&, const HelloMsg&) = default;
};

struct GradMsg {
  std::uint32_t epoch = 0;
  std::uint32_t step = 0;
  std::uint16_t worker_id = 0;
  DenseVector payload{0.0};

  friend bool operator==(const GradMsg&, const GradMsg&) = default;
};

struct AvgGradMsg {
  std::uint32_t epoch = 0;
  std::uint32_t step = 0;
  DenseVector payload{0.0};

  friend bool operator==(const AvgGradMsg&, const AvgGradMsg&) = default;
};

struct PermMsg {
  std::uint32_t epoch = 0;
  std::uint16_t worker_id = 0;
  Permutation indices;

  friend bool operator==(const PermMsg&, const PermMsg&) = default;
};

struct DoneMsg {
  friend bool operator==(const DoneMsg&, const DoneMsg&) = default;
};

using Message = std::variant<HelloMsg, GradMsg, AvgGradMsg, PermMsg, DoneMsg>;

enum class MessageType : std::uint8_t {
  kHello = 0x01,
  kGrad = 0x02,
  kAvgGrad = 0x03,
  kPerm = 0x04,
  kDone = 0x05,
};

MessageType message_type(const Message& msg) noexcept;
std::string_view message_name(MessageType type) noexcept;

/// Malformed frame. `offset` is the byte position (from the frame start)
/// where decoding failed.
class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& what, std::size_t offset);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Peer disconnected, socket failure, or channel closed mid-session.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hello rejected: wrong n, d, worker id, or config hash.
class HandshakeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode(const Message& msg);

/// Decodes exactly one frame; trailing bytes are an error.
Message decode(std::span<const std::uint8_t> frame);

/// Decodes the frame at the start of `bytes`. Returns nullopt when more
/// bytes are needed; otherwise the message and the frame's total size.
std::optional<std::pair<Message, std::size_t>> decode_prefix(std::span<const std::uint8_t> bytes);

/// Incremental decoder over a byte stream that may split frames anywhere.
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  std::optional<Message> next();
  std::size_t buffered() const noexcept { return buffer_.size() - start_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t start_ = 0;
};

/// One ordered, lossless, bidirectional link to a single peer.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Message& msg) = 0;
  /// Blocks for the next message. Throws TransportError once the peer is gone.
  virtual Message receive() = 0;
  virtual void close() = 0;
};

/// Two connected in-process endpoints. Messages cross as encoded frames.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_memory_channel_pair();

/// host:port parsed from "host:port".
struct TcpAddress {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static TcpAddress parse(std::string_view text);
  std::string to_string() const;
};

/// Listening socket on the server side. Port 0 binds an ephemeral port.
class TcpListener {
 public:
  explicit TcpListener(const TcpAddress& address);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const;
  std::unique_ptr<Channel> accept();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct RetryPolicy {
  int attempts = 20;
  std::chrono::milliseconds initial_delay{50};
  std::chrono::milliseconds max_delay{1000};
};

/// Connects, retrying refused connections with doubling delays up to
/// max_delay. Throws TransportError after the last attempt.
std::unique_ptr<Channel> connect_with_retry(const TcpAddress& address,
                                            const RetryPolicy& retry = {});

/// What the server expects from every worker's Hello.
struct HandshakeSpec {
  std::uint32_t units = 0;
  std::uint32_t dim = 0;
  std::optional<std::uint64_t> config_hash;
};

/// Workers reached through channels. The constructor reads one Hello per
/// channel and orders the channels by worker id.
class RemoteWorkerGroup final : public WorkerGroup {
 public:
  RemoteWorkerGroup(std::vector<Channel*> channels, const HandshakeSpec& spec);

  std::size_t size() const override { return channels_.size(); }
  void assign_permutations(std::uint32_t epoch, std::span<const Permutation> perms) override;
  std::vector<DenseVector> collect_gradients(std::uint32_t epoch, std::uint32_t step) override;
  void broadcast_average(std::uint32_t epoch, std::uint32_t step,
                         const DenseVector& avg) override;
  /// Sends Done to every worker and waits for each Done reply.
  void finish() override;

 private:
  std::vector<Channel*> channels_;
  HandshakeSpec spec_;
};

/// Worker side of one session: Hello, then Perm / (Grad, AvgGrad)* until
/// Done, which is answered with Done.
void run_worker_session(Channel& channel, Worker& worker,
                        std::optional<std::uint64_t> config_hash = std::nullopt);

}  // namespace ordbal
