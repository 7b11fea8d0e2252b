// Reliable ordered frame transports: in-process loopback (bounded queues) and
// a TCP byte-stream carrying the self-delimiting frames.
#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqkd {

struct TransportClosed : std::runtime_error {
    TransportClosed() : std::runtime_error("transport closed") {}
};

class Transport {
public:
    virtual ~Transport() = default;
    // Blocking send of one whole frame (backpressure applies).
    virtual void send(const std::vector<std::uint8_t>& frame) = 0;
    // One whole frame; nullopt on timeout; throws TransportClosed on EOF.
    virtual std::optional<std::vector<std::uint8_t>> recv(int timeout_ms) = 0;
    virtual void close() = 0;
};

// Two-ended in-process transport with bounded per-direction queues.
struct LoopbackPair {
    std::unique_ptr<Transport> a;
    std::unique_ptr<Transport> b;
};
LoopbackPair make_loopback(std::size_t queue_depth = 8);

class TcpTransport final : public Transport {
public:
    // Listen and accept exactly one peer.
    static std::unique_ptr<TcpTransport> listen(const std::string& addr, std::uint16_t port);
    static std::unique_ptr<TcpTransport> connect(const std::string& host, std::uint16_t port,
                                                 int timeout_s = 30);
    ~TcpTransport() override;

    void send(const std::vector<std::uint8_t>& frame) override;
    std::optional<std::vector<std::uint8_t>> recv(int timeout_ms) override;
    void close() override;

private:
    explicit TcpTransport(int fd) : fd_(fd) {}
    int fd_ = -1;
    std::vector<std::uint8_t> rxbuf_;
};

} // namespace eqkd
