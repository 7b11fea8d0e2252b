#include "eqkd/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

#include "eqkd/messages.hpp"

namespace eqkd {

namespace {

// One direction of the loopback: mutex-guarded bounded frame queue.
struct Pipe {
    std::mutex m;
    std::condition_variable cv_send, cv_recv;
    std::deque<std::vector<std::uint8_t>> q;
    std::size_t depth;
    bool closed = false;

    explicit Pipe(std::size_t d) : depth(d) {}

    void push(const std::vector<std::uint8_t>& frame) {
        std::unique_lock lk(m);
        cv_send.wait(lk, [&] { return q.size() < depth || closed; });
        if (closed) throw TransportClosed{};
        q.push_back(frame);
        cv_recv.notify_one();
    }
    std::optional<std::vector<std::uint8_t>> pop(int timeout_ms) {
        std::unique_lock lk(m);
        if (timeout_ms <= 0) {
            if (q.empty()) {
                if (closed) throw TransportClosed{};
                return std::nullopt;
            }
        } else {
            cv_recv.wait_for(lk, std::chrono::milliseconds(timeout_ms),
                             [&] { return !q.empty() || closed; });
            if (q.empty()) {
                if (closed) throw TransportClosed{};
                return std::nullopt;
            }
        }
        auto frame = std::move(q.front());
        q.pop_front();
        cv_send.notify_one();
        return frame;
    }
    void close() {
        std::lock_guard lk(m);
        closed = true;
        cv_send.notify_all();
        cv_recv.notify_all();
    }
};

class LoopbackEnd final : public Transport {
public:
    LoopbackEnd(std::shared_ptr<Pipe> tx, std::shared_ptr<Pipe> rx)
        : tx_(std::move(tx)), rx_(std::move(rx)) {}
    ~LoopbackEnd() override { close(); }

    void send(const std::vector<std::uint8_t>& frame) override { tx_->push(frame); }
    std::optional<std::vector<std::uint8_t>> recv(int timeout_ms) override {
        return rx_->pop(timeout_ms);
    }
    void close() override {
        tx_->close();
        rx_->close();
    }

private:
    std::shared_ptr<Pipe> tx_, rx_;
};

} // namespace

LoopbackPair make_loopback(std::size_t queue_depth) {
    auto ab = std::make_shared<Pipe>(queue_depth);
    auto ba = std::make_shared<Pipe>(queue_depth);
    LoopbackPair pair;
    pair.a = std::make_unique<LoopbackEnd>(ab, ba);
    pair.b = std::make_unique<LoopbackEnd>(ba, ab);
    return pair;
}

// ---------------------------------------------------------------------------

std::unique_ptr<TcpTransport> TcpTransport::listen(const std::string& addr, std::uint16_t port) {
    const int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (lfd < 0) throw std::runtime_error("socket: " + std::string(strerror(errno)));
    const int one = 1;
    ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, addr.c_str(), &sa.sin_addr) != 1)
        sa.sin_addr.s_addr = INADDR_ANY;
    if (::bind(lfd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
        ::close(lfd);
        throw std::runtime_error("bind: " + std::string(strerror(errno)));
    }
    if (::listen(lfd, 1) != 0) {
        ::close(lfd);
        throw std::runtime_error("listen: " + std::string(strerror(errno)));
    }
    const int fd = ::accept(lfd, nullptr, nullptr);
    ::close(lfd);
    if (fd < 0) throw std::runtime_error("accept: " + std::string(strerror(errno)));
    const int nd = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &nd, sizeof nd);
    return std::unique_ptr<TcpTransport>(new TcpTransport(fd));
}

std::unique_ptr<TcpTransport> TcpTransport::connect(const std::string& host, std::uint16_t port,
                                                    int timeout_s) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port_s = std::to_string(port);
    if (::getaddrinfo(host.c_str(), port_s.c_str(), &hints, &res) != 0 || !res)
        throw std::runtime_error("getaddrinfo failed for " + host);

    int fd = -1;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(timeout_s);
    for (;;) {
        fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
        if (fd < 0) break;
        if (::connect(fd, res->ai_addr, res->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
        if (std::chrono::steady_clock::now() >= deadline) break;
        ::usleep(200'000); // peer may not be listening yet
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw std::runtime_error("connect to " + host + ":" + port_s + " failed");
    const int nd = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &nd, sizeof nd);
    return std::unique_ptr<TcpTransport>(new TcpTransport(fd));
}

TcpTransport::~TcpTransport() { close(); }

void TcpTransport::close() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
        fd_ = -1;
    }
}

void TcpTransport::send(const std::vector<std::uint8_t>& frame) {
    if (fd_ < 0) throw TransportClosed{};
    std::size_t off = 0;
    while (off < frame.size()) {
        const ssize_t n = ::write(fd_, frame.data() + off, frame.size() - off);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            throw TransportClosed{};
        }
        off += static_cast<std::size_t>(n);
    }
}

std::optional<std::vector<std::uint8_t>> TcpTransport::recv(int timeout_ms) {
    if (fd_ < 0) throw TransportClosed{};
    for (;;) {
        // A full frame already buffered?
        if (auto need = frame_size(rxbuf_); need && rxbuf_.size() >= *need) {
            std::vector<std::uint8_t> frame(rxbuf_.begin(),
                                            rxbuf_.begin() + static_cast<std::ptrdiff_t>(*need));
            rxbuf_.erase(rxbuf_.begin(), rxbuf_.begin() + static_cast<std::ptrdiff_t>(*need));
            return frame;
        }
        pollfd pf{fd_, POLLIN, 0};
        const int pr = ::poll(&pf, 1, timeout_ms);
        if (pr == 0) return std::nullopt;
        if (pr < 0) {
            if (errno == EINTR) continue;
            throw TransportClosed{};
        }
        std::uint8_t buf[65536];
        const ssize_t n = ::read(fd_, buf, sizeof buf);
        if (n == 0) throw TransportClosed{};
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportClosed{};
        }
        rxbuf_.insert(rxbuf_.end(), buf, buf + n);
    }
}

} // namespace eqkd
