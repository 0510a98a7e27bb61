// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include "doq/bytes.hpp"
#include "doq/errors.hpp"

namespace doq {

// Resolved socket address; value type usable as a routing key.
class SocketAddress {
public:
    SocketAddress() { std::memset(&storage_, 0, sizeof(storage_)); }

    SocketAddress(const sockaddr* sa, socklen_t len) : len_(len) {
        std::memset(&storage_, 0, sizeof(storage_));
        std::memcpy(&storage_, sa, len);
    }

    // Accepts "host:port", "ip:port", or "[v6]:port".
    static SocketAddress resolve(const std::string& spec, std::uint16_t default_port) {
        std::string host = spec, port;
        if (!spec.empty() && spec.front() == '[') {
            auto close = spec.find(']');
            if (close == std::string::npos) throw ConnectFailed("bad address: " + spec);
            host = spec.substr(1, close - 1);
            if (close + 1 < spec.size() && spec[close + 1] == ':')
                port = spec.substr(close + 2);
        } else {
            auto colon = spec.rfind(':');
            if (colon != std::string::npos && spec.find(':') == colon) {
                host = spec.substr(0, colon);
                port = spec.substr(colon + 1);
            }
        }
        if (port.empty()) port = std::to_string(default_port);
        if (host.empty()) host = "0.0.0.0";

        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_DGRAM;
        addrinfo* res = nullptr;
        int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res);
        if (rc != 0 || !res)
            throw ConnectFailed("resolve " + spec + ": " + gai_strerror(rc));
        SocketAddress out(res->ai_addr, static_cast<socklen_t>(res->ai_addrlen));
        ::freeaddrinfo(res);
        return out;
    }

    const sockaddr* data() const { return reinterpret_cast<const sockaddr*>(&storage_); }
    sockaddr* data() { return reinterpret_cast<sockaddr*>(&storage_); }
    socklen_t length() const { return len_; }
    socklen_t* length_ptr() { return &len_; }
    void set_length(socklen_t len) { len_ = len; }

    std::string to_string() const {
        char host[NI_MAXHOST] = {}, port[NI_MAXSERV] = {};
        if (::getnameinfo(data(), len_, host, sizeof(host), port, sizeof(port),
                          NI_NUMERICHOST | NI_NUMERICSERV) != 0)
            return "<unknown>";
        return std::string(host) + ":" + port;
    }

    std::uint16_t port() const {
        if (storage_.ss_family == AF_INET)
            return ntohs(reinterpret_cast<const sockaddr_in*>(&storage_)->sin_port);
        if (storage_.ss_family == AF_INET6)
            return ntohs(reinterpret_cast<const sockaddr_in6*>(&storage_)->sin6_port);
        return 0;
    }

    bool operator==(const SocketAddress& o) const {
        return len_ == o.len_ && std::memcmp(&storage_, &o.storage_, len_) == 0;
    }

private:
    sockaddr_storage storage_;
    socklen_t len_ = sizeof(sockaddr_storage);
};

struct UdpPacket {
    Bytes payload;
    SocketAddress from;
};

// RAII UDP socket with poll-based timed receive.
class UdpSocket {
public:
    UdpSocket() = default;
    explicit UdpSocket(int family) { open(family); }
    ~UdpSocket() { close(); }
    UdpSocket(UdpSocket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    UdpSocket& operator=(UdpSocket&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = o.fd_;
            o.fd_ = -1;
        }
        return *this;
    }
    UdpSocket(const UdpSocket&) = delete;
    UdpSocket& operator=(const UdpSocket&) = delete;

    void open(int family) {
        close();
        fd_ = ::socket(family, SOCK_DGRAM, 0);
        if (fd_ < 0) throw BindFailed(std::string("socket: ") + std::strerror(errno));
    }

    void bind(const SocketAddress& addr) {
        if (fd_ < 0) open(addr.data()->sa_family);
        if (::bind(fd_, addr.data(), addr.length()) != 0)
            throw BindFailed("bind " + addr.to_string() + ": " + std::strerror(errno));
    }

    void connect(const SocketAddress& addr) {
        if (fd_ < 0) open(addr.data()->sa_family);
        if (::connect(fd_, addr.data(), addr.length()) != 0)
            throw ConnectFailed("connect " + addr.to_string() + ": " + std::strerror(errno));
    }

    void send(BytesView payload) {
        if (::send(fd_, payload.data(), payload.size(), 0) < 0 && errno != ECONNREFUSED)
            throw IoFailure(std::string("send: ") + std::strerror(errno));
    }

    void send_to(BytesView payload, const SocketAddress& dest) {
        if (::sendto(fd_, payload.data(), payload.size(), 0, dest.data(), dest.length()) < 0 &&
            errno != ECONNREFUSED)
            throw IoFailure(std::string("sendto: ") + std::strerror(errno));
    }

    // Waits up to `timeout` for one datagram; empty optional on timeout.
    std::optional<UdpPacket> receive(std::chrono::milliseconds timeout) {
        auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            pollfd pfd{fd_, POLLIN, 0};
            int rc = ::poll(&pfd, 1, static_cast<int>(std::max<long long>(left.count(), 0)));
            if (rc <= 0) return std::nullopt;
            UdpPacket pkt;
            pkt.payload.resize(65536);
            ssize_t n = ::recvfrom(fd_, pkt.payload.data(), pkt.payload.size(), 0,
                                   pkt.from.data(), pkt.from.length_ptr());
            if (n >= 0) {
                pkt.payload.resize(static_cast<std::size_t>(n));
                return pkt;
            }
            // ECONNREFUSED drains an ICMP error from an earlier send; anything
            // transient goes back to poll so a blocking read can never wedge.
            if (errno != ECONNREFUSED && errno != EINTR && errno != EAGAIN)
                return std::nullopt;
        }
    }

    SocketAddress local_address() const {
        SocketAddress addr;
        if (::getsockname(fd_, addr.data(), addr.length_ptr()) != 0)
            throw IoFailure(std::string("getsockname: ") + std::strerror(errno));
        return addr;
    }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }

private:
    int fd_ = -1;
};

} // namespace doq
