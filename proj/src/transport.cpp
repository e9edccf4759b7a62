// SPDX-License-Identifier: Apache-2.0

#include "ordbal/transport.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/read.hpp>
#include <boost/asio/write.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace ordbal {

namespace asio = boost::asio;
using asio::ip::tcp;

namespace {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  void count(std::size_t n) {
    if (n > 0xFFFFFFFFu) throw DomainError("vector too long for the wire format");
    u32(static_cast<std::uint32_t>(n));
  }

  std::vector<std::uint8_t> finish() {
    const std::size_t length = out_.size() - 4;
    if (length > kMaxFrameLength) {
      throw DomainError(fmt::format("frame of {} bytes exceeds the {} byte cap", length,
                                    kMaxFrameLength));
    }
    for (int k = 0; k < 4; ++k) out_[k] = static_cast<std::uint8_t>(length >> (8 * k));
    return std::move(out_);
  }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int k = 0; k < bytes; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }

  std::vector<std::uint8_t> out_ = std::vector<std::uint8_t>(4, 0);
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> frame, std::size_t pos) : frame_(frame), pos_(pos) {}

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return frame_.size() - pos_; }

  std::uint16_t u16(const char* field) { return static_cast<std::uint16_t>(get(2, field)); }
  std::uint32_t u32(const char* field) { return static_cast<std::uint32_t>(get(4, field)); }
  std::uint64_t u64(const char* field) { return get(8, field); }

  double f64(const char* field) {
    const std::size_t at = pos_;
    const double v = std::bit_cast<double>(get(8, field));
    if (!std::isfinite(v)) throw DecodeError(fmt::format("non-finite {}", field), at);
    return v;
  }

  DenseVector vector(const char* field) {
    const std::size_t at = pos_;
    const std::uint32_t n = u32("vector length");
    if (n == 0) throw DecodeError(fmt::format("empty {}", field), at);
    if (remaining() / 8 < n) throw DecodeError(fmt::format("truncated {}", field), frame_.size());
    std::vector<double> values(n);
    for (auto& v : values) v = f64(field);
    return DenseVector(std::move(values));
  }

  Permutation permutation() {
    const std::uint32_t n = u32("permutation length");
    const std::size_t at = pos_;
    if (remaining() / 4 < n) throw DecodeError("truncated permutation", frame_.size());
    std::vector<Permutation::Index> map(n);
    for (auto& v : map) v = u32("permutation index");
    if (!is_bijection(map)) throw DecodeError("permutation indices are not a bijection", at);
    return Permutation(std::move(map));
  }

 private:
  std::uint64_t get(int bytes, const char* field) {
    if (remaining() < static_cast<std::size_t>(bytes)) {
      throw DecodeError(fmt::format("truncated {}", field), frame_.size());
    }
    std::uint64_t v = 0;
    for (int k = 0; k < bytes; ++k) v |= std::uint64_t{frame_[pos_ + k]} << (8 * k);
    pos_ += bytes;
    return v;
  }

  std::span<const std::uint8_t> frame_;
  std::size_t pos_;
};

std::uint32_t read_length(std::span<const std::uint8_t> bytes) {
  std::uint32_t length = 0;
  for (int k = 0; k < 4; ++k) length |= std::uint32_t{bytes[k]} << (8 * k);
  return length;
}

void check_length(std::uint32_t length) {
  if (length == 0) throw DecodeError("zero-length frame has no type byte", 0);
  if (length > kMaxFrameLength) {
    throw DecodeError(fmt::format("frame length {} exceeds the {} byte cap", length,
                                  kMaxFrameLength),
                      0);
  }
}

// `frame` holds exactly one complete frame.
Message decode_body(std::span<const std::uint8_t> frame) {
  ByteReader in(frame, 5);
  const std::uint8_t type = frame[4];
  Message msg;
  switch (static_cast<MessageType>(type)) {
    case MessageType::kHello: {
      HelloMsg m;
      m.worker_id = in.u16("worker id");
      m.n = in.u32("n");
      m.d = in.u32("d");
      if (in.remaining() >= 8) m.config_hash = in.u64("config hash");
      msg = m;
      break;
    }
    case MessageType::kGrad: {
      GradMsg m;
      m.epoch = in.u32("epoch");
      m.step = in.u32("step");
      m.worker_id = in.u16("worker id");
      m.payload = in.vector("gradient");
      msg = std::move(m);
      break;
    }
    case MessageType::kAvgGrad: {
      AvgGradMsg m;
      m.epoch = in.u32("epoch");
      m.step = in.u32("step");
      m.payload = in.vector("average gradient");
      msg = std::move(m);
      break;
    }
    case MessageType::kPerm: {
      PermMsg m;
      m.epoch = in.u32("epoch");
      m.worker_id = in.u16("worker id");
      m.indices = in.permutation();
      msg = std::move(m);
      break;
    }
    case MessageType::kDone:
      msg = DoneMsg{};
      break;
    default:
      throw DecodeError(fmt::format("unknown message type 0x{:02X}", type), 4);
  }
  if (in.remaining() != 0) {
    throw DecodeError(fmt::format("length mismatch: {} unread payload bytes", in.remaining()),
                      in.pos());
  }
  return msg;
}

}  // namespace

DecodeError::DecodeError(const std::string& what, std::size_t offset)
    : std::runtime_error(fmt::format("decode error at byte {}: {}", offset, what)),
      offset_(offset) {}

MessageType message_type(const Message& msg) noexcept {
  return static_cast<MessageType>(msg.index() + 1);
}

std::string_view message_name(MessageType type) noexcept {
  switch (type) {
    case MessageType::kHello:
      return "Hello";
    case MessageType::kGrad:
      return "Grad";
    case MessageType::kAvgGrad:
      return "AvgGrad";
    case MessageType::kPerm:
      return "Perm";
    case MessageType::kDone:
      return "Done";
  }
  return "Unknown";
}

std::vector<std::uint8_t> encode(const Message& msg) {
  ByteWriter out;
  out.u8(static_cast<std::uint8_t>(message_type(msg)));
  std::visit(
      [&out](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, HelloMsg>) {
          out.u16(m.worker_id);
          out.u32(m.n);
          out.u32(m.d);
          if (m.config_hash) out.u64(*m.config_hash);
        } else if constexpr (std::is_same_v<T, GradMsg>) {
          out.u32(m.epoch);
          out.u32(m.step);
          out.u16(m.worker_id);
          out.count(m.payload.dim());
          for (double v : m.payload.values()) out.f64(v);
        } else if constexpr (std::is_same_v<T, AvgGradMsg>) {
          out.u32(m.epoch);
          out.u32(m.step);
          out.count(m.payload.dim());
          for (double v : m.payload.values()) out.f64(v);
        } else if constexpr (std::is_same_v<T, PermMsg>) {
          out.u32(m.epoch);
          out.u16(m.worker_id);
          out.count(m.indices.size());
          for (auto v : m.indices.indices()) out.u32(v);
        }
      },
      msg);
  return out.finish();
}

std::optional<std::pair<Message, std::size_t>> decode_prefix(
    std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return std::nullopt;
  const std::uint32_t length = read_length(bytes);
  check_length(length);
  const std::size_t total = std::size_t{length} + 4;
  if (bytes.size() < total) return std::nullopt;
  return std::pair{decode_body(bytes.first(total)), total};
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < 4) throw DecodeError("truncated length prefix", frame.size());
  const std::uint32_t length = read_length(frame);
  check_length(length);
  const std::size_t total = std::size_t{length} + 4;
  if (frame.size() < total) throw DecodeError("truncated frame", frame.size());
  if (frame.size() > total) {
    throw DecodeError(fmt::format("length mismatch: {} trailing bytes", frame.size() - total),
                      total);
  }
  return decode_body(frame);
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
  if (start_ > 0 && start_ == buffer_.size()) {
    buffer_.clear();
    start_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> FrameReader::next() {
  auto decoded = decode_prefix(std::span(buffer_).subspan(start_));
  if (!decoded) return std::nullopt;
  start_ += decoded->second;
  if (start_ > 4096 && start_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  return std::move(decoded->first);
}

// ---------------------------------------------------------------------------

namespace {

struct FrameQueue {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<std::vector<std::uint8_t>> frames;
  bool closed = false;

  void push(std::vector<std::uint8_t> frame) {
    {
      std::lock_guard lock(mutex);
      if (closed) throw TransportError("send on a closed channel");
      frames.push_back(std::move(frame));
    }
    ready.notify_one();
  }

  std::vector<std::uint8_t> pop() {
    std::unique_lock lock(mutex);
    ready.wait(lock, [this] { return closed || !frames.empty(); });
    if (frames.empty()) throw TransportError("peer closed the channel");
    auto frame = std::move(frames.front());
    frames.pop_front();
    return frame;
  }

  void close() {
    {
      std::lock_guard lock(mutex);
      closed = true;
    }
    ready.notify_all();
  }
};

class MemoryChannel final : public Channel {
 public:
  MemoryChannel(std::shared_ptr<FrameQueue> inbox, std::shared_ptr<FrameQueue> outbox)
      : inbox_(std::move(inbox)), outbox_(std::move(outbox)) {}
  ~MemoryChannel() override { close(); }

  void send(const Message& msg) override { outbox_->push(encode(msg)); }
  Message receive() override { return decode(inbox_->pop()); }
  void close() override {
    outbox_->close();
    inbox_->close();
  }

 private:
  std::shared_ptr<FrameQueue> inbox_;
  std::shared_ptr<FrameQueue> outbox_;
};

class TcpChannel final : public Channel {
 public:
  explicit TcpChannel(tcp::socket socket) : socket_(std::move(socket)) {
    socket_.set_option(tcp::no_delay(true));
  }
  ~TcpChannel() override { close(); }

  void send(const Message& msg) override {
    const auto frame = encode(msg);
    boost::system::error_code ec;
    asio::write(socket_, asio::buffer(frame), ec);
    if (ec) throw TransportError(fmt::format("send failed: {}", ec.message()));
  }

  Message receive() override {
    std::array<std::uint8_t, 4> header{};
    read_exact(header.data(), header.size());
    const std::uint32_t length = read_length(header);
    check_length(length);
    std::vector<std::uint8_t> frame(std::size_t{length} + 4);
    std::copy(header.begin(), header.end(), frame.begin());
    read_exact(frame.data() + 4, length);
    return decode(frame);
  }

  void close() override {
    boost::system::error_code ignored;
    if (socket_.is_open()) {
      socket_.shutdown(tcp::socket::shutdown_both, ignored);
      socket_.close(ignored);
    }
  }

 private:
  void read_exact(std::uint8_t* data, std::size_t size) {
    boost::system::error_code ec;
    asio::read(socket_, asio::buffer(data, size), ec);
    if (ec) throw TransportError(fmt::format("peer disconnected: {}", ec.message()));
  }

  tcp::socket socket_;
};

// One io_context per process is enough for blocking sockets.
asio::io_context& io_context() {
  static asio::io_context context;
  return context;
}

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_memory_channel_pair() {
  auto a_to_b = std::make_shared<FrameQueue>();
  auto b_to_a = std::make_shared<FrameQueue>();
  return {std::make_unique<MemoryChannel>(b_to_a, a_to_b),
          std::make_unique<MemoryChannel>(a_to_b, b_to_a)};
}

TcpAddress TcpAddress::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw ConfigError(fmt::format("address '{}' is not host:port", text));
  }
  const auto port_text = text.substr(colon + 1);
  unsigned port = 0;
  const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535) {
    throw ConfigError(fmt::format("address '{}' has an invalid port", text));
  }
  return TcpAddress{std::string(text.substr(0, colon)), static_cast<std::uint16_t>(port)};
}

std::string TcpAddress::to_string() const { return fmt::format("{}:{}", host, port); }

struct TcpListener::Impl {
  tcp::acceptor acceptor{io_context()};
};

TcpListener::TcpListener(const TcpAddress& address) : impl_(std::make_unique<Impl>()) {
  boost::system::error_code ec;
  const auto ip = asio::ip::make_address(address.host, ec);
  if (ec) throw ConfigError(fmt::format("bad listen host '{}': {}", address.host, ec.message()));
  const tcp::endpoint endpoint(ip, address.port);
  impl_->acceptor.open(endpoint.protocol());
  impl_->acceptor.set_option(tcp::acceptor::reuse_address(true));
  impl_->acceptor.bind(endpoint, ec);
  if (ec) throw TransportError(fmt::format("bind {} failed: {}", address.to_string(), ec.message()));
  impl_->acceptor.listen();
}

TcpListener::~TcpListener() = default;

std::uint16_t TcpListener::port() const { return impl_->acceptor.local_endpoint().port(); }

std::unique_ptr<Channel> TcpListener::accept() {
  tcp::socket socket(io_context());
  boost::system::error_code ec;
  impl_->acceptor.accept(socket, ec);
  if (ec) throw TransportError(fmt::format("accept failed: {}", ec.message()));
  return std::make_unique<TcpChannel>(std::move(socket));
}

std::unique_ptr<Channel> connect_with_retry(const TcpAddress& address, const RetryPolicy& retry) {
  tcp::resolver resolver(io_context());
  boost::system::error_code ec;
  const auto endpoints = resolver.resolve(address.host, std::to_string(address.port), ec);
  if (ec) throw TransportError(fmt::format("cannot resolve {}: {}", address.host, ec.message()));
  auto delay = retry.initial_delay;
  for (int attempt = 1; attempt <= retry.attempts; ++attempt) {
    tcp::socket socket(io_context());
    asio::connect(socket, endpoints, ec);
    if (!ec) return std::make_unique<TcpChannel>(std::move(socket));
    spdlog::debug("connect {} attempt {}/{}: {}", address.to_string(), attempt, retry.attempts,
                  ec.message());
    if (attempt == retry.attempts) break;
    std::this_thread::sleep_for(delay);
    delay = std::min(delay * 2, retry.max_delay);
  }
  throw TransportError(fmt::format("could not connect to {} after {} attempts: {}",
                                   address.to_string(), retry.attempts, ec.message()));
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
T expect(Channel& channel, std::string_view context) {
  Message msg = channel.receive();
  if (auto* m = std::get_if<T>(&msg)) return std::move(*m);
  throw ProtocolError(fmt::format("{}: unexpected {} message", context,
                                  message_name(message_type(msg))));
}

}  // namespace

RemoteWorkerGroup::RemoteWorkerGroup(std::vector<Channel*> channels, const HandshakeSpec& spec)
    : channels_(channels.size(), nullptr), spec_(spec) {
  for (Channel* channel : channels) {
    const auto hello = expect<HelloMsg>(*channel, "handshake");
    if (hello.worker_id >= channels.size()) {
      throw HandshakeError(fmt::format("worker id {} out of range for m = {}", hello.worker_id,
                                       channels.size()));
    }
    if (channels_[hello.worker_id] != nullptr) {
      throw HandshakeError(fmt::format("worker id {} connected twice", hello.worker_id));
    }
    if (hello.d != spec.dim) {
      throw HandshakeError(fmt::format("worker {} declared d = {}, server expects d = {}",
                                       hello.worker_id, hello.d, spec.dim));
    }
    if (hello.n != spec.units) {
      throw HandshakeError(fmt::format("worker {} declared n = {}, server expects n = {}",
                                       hello.worker_id, hello.n, spec.units));
    }
    if (spec.config_hash && hello.config_hash != spec.config_hash) {
      throw HandshakeError(fmt::format("worker {} config hash {} != server config hash {:016x}",
                                       hello.worker_id,
                                       hello.config_hash ? fmt::format("{:016x}", *hello.config_hash)
                                                         : std::string("(none)"),
                                       *spec.config_hash));
    }
    channels_[hello.worker_id] = channel;
  }
}

void RemoteWorkerGroup::assign_permutations(std::uint32_t epoch,
                                            std::span<const Permutation> perms) {
  if (perms.size() != channels_.size()) throw ProtocolError("permutation count != worker count");
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    channels_[i]->send(PermMsg{epoch, static_cast<std::uint16_t>(i), perms[i]});
  }
}

std::vector<DenseVector> RemoteWorkerGroup::collect_gradients(std::uint32_t epoch,
                                                              std::uint32_t step) {
  std::vector<DenseVector> grads;
  grads.reserve(channels_.size());
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    auto grad = expect<GradMsg>(*channels_[i], fmt::format("epoch {} step {}", epoch, step));
    if (grad.epoch != epoch || grad.step != step || grad.worker_id != i) {
      throw ProtocolError(fmt::format("expected Grad({}, {}, {}), got Grad({}, {}, {})", epoch,
                                      step, i, grad.epoch, grad.step, grad.worker_id));
    }
    if (grad.payload.dim() != spec_.dim) {
      throw ProtocolError(fmt::format("worker {} sent a gradient of dimension {}", i,
                                      grad.payload.dim()));
    }
    grads.push_back(std::move(grad.payload));
  }
  return grads;
}

void RemoteWorkerGroup::broadcast_average(std::uint32_t epoch, std::uint32_t step,
                                          const DenseVector& avg) {
  for (Channel* channel : channels_) channel->send(AvgGradMsg{epoch, step, avg});
}

void RemoteWorkerGroup::finish() {
  for (Channel* channel : channels_) channel->send(DoneMsg{});
  for (Channel* channel : channels_) expect<DoneMsg>(*channel, "shutdown");
}

void run_worker_session(Channel& channel, Worker& worker,
                        std::optional<std::uint64_t> config_hash) {
  if (worker.id() > 0xFFFF || worker.units() > 0xFFFFFFFFu) {
    throw DomainError("worker id or unit count does not fit the wire format");
  }
  const auto id = static_cast<std::uint16_t>(worker.id());
  const auto units = static_cast<std::uint32_t>(worker.units());
  channel.send(HelloMsg{id, units, static_cast<std::uint32_t>(worker.weights().dim()),
                        config_hash});
  for (;;) {
    Message msg = channel.receive();
    if (std::holds_alternative<DoneMsg>(msg)) {
      channel.send(DoneMsg{});
      return;
    }
    auto* perm = std::get_if<PermMsg>(&msg);
    if (perm == nullptr) {
      throw ProtocolError(fmt::format("worker {}: unexpected {} message", id,
                                      message_name(message_type(msg))));
    }
    if (perm->worker_id != id) {
      throw ProtocolError(fmt::format("worker {} received the permutation for worker {}", id,
                                      perm->worker_id));
    }
    const std::uint32_t epoch = perm->epoch;
    worker.set_permutation(std::move(perm->indices));
    for (std::uint32_t step = 1; step <= units; ++step) {
      channel.send(GradMsg{epoch, step, id, worker.compute_gradient(step)});
      auto avg = expect<AvgGradMsg>(channel, fmt::format("worker {}", id));
      if (avg.epoch != epoch || avg.step != step) {
        throw ProtocolError(fmt::format("worker {} expected AvgGrad({}, {}), got AvgGrad({}, {})",
                                        id, epoch, step, avg.epoch, avg.step));
      }
      worker.apply(avg.payload);
    }
  }
}

}  // namespace ordbal
