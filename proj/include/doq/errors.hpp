// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace doq {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- dns_codec ---

struct CodecError : Error {
    using Error::Error;
};

struct OversizeMessage : CodecError {
    using CodecError::CodecError;
};
struct InvalidLabel : CodecError {
    using CodecError::CodecError;
};
struct InvalidRecord : CodecError {
    using CodecError::CodecError;
};
struct TruncatedMessage : CodecError {
    using CodecError::CodecError;
};
struct CompressionLoop : CodecError {
    using CodecError::CodecError;
};
struct CountMismatch : CodecError {
    using CodecError::CodecError;
};
struct NotAQuery : CodecError {
    using CodecError::CodecError;
};
/// Raised only when decoding with DecodeOptions::strict set.
struct StrictViolation : CodecError {
    using CodecError::CodecError;
};

// --- transport sessions ---

struct TransportError : Error {
    using Error::Error;
};

struct ConnectionClosed : TransportError {
    explicit ConnectionClosed(std::string what, std::uint64_t code = 0)
        : TransportError(std::move(what)), application_code(code) {}
    explicit ConnectionClosed(std::uint64_t code)
        : ConnectionClosed("connection closed, code " + std::to_string(code), code) {}
    std::uint64_t application_code;
};
struct StreamsExhausted : TransportError {
    StreamsExhausted() : TransportError("stream credit exhausted") {}
    using TransportError::TransportError;
};
struct DatagramsUnsupported : TransportError {
    DatagramsUnsupported() : TransportError("peer did not advertise datagram support") {}
    using TransportError::TransportError;
};
struct DatagramTooLarge : TransportError {
    DatagramTooLarge(std::size_t size, std::size_t budget)
        : TransportError("datagram of " + std::to_string(size) +
                         " octets exceeds negotiated budget " + std::to_string(budget)) {}
    using TransportError::TransportError;
};
struct PeerStreamError : TransportError {
    explicit PeerStreamError(std::uint64_t code)
        : TransportError("peer aborted stream, code " + std::to_string(code)), code(code) {}
    std::uint64_t code;
};
/// Surfaced to a blocked reader after this side cancelled the stream.
struct StreamCancelled : TransportError {
    StreamCancelled() : TransportError("stream cancelled locally") {}
};
struct ConnectFailed : TransportError {
    using TransportError::TransportError;
};
struct BindFailed : TransportError {
    using TransportError::TransportError;
};

// --- exchange engine ---

struct ExchangeError : Error {
    using Error::Error;
};

struct RetriesExhausted : ExchangeError {
    using ExchangeError::ExchangeError;
};
struct TimeoutError : ExchangeError {
    using ExchangeError::ExchangeError;
};
struct ProtocolError : ExchangeError {
    using ExchangeError::ExchangeError;
};
struct IdSpaceExhausted : ExchangeError {
    using ExchangeError::ExchangeError;
};
struct AlreadyCompleted : ExchangeError {
    using ExchangeError::ExchangeError;
};
/// Datagram transactions have no cancellation signal on the wire.
struct CancellationUnsupported : ExchangeError {
    using ExchangeError::ExchangeError;
};

// --- upstream forwarding ---

struct UpstreamTimeout : Error {
    using Error::Error;
};
struct UpstreamMalformed : Error {
    using Error::Error;
};

// --- bench harness ---

struct MalformedTrace : Error {
    using Error::Error;
};
struct EmptySamples : Error {
    using Error::Error;
};
struct CryptoError : Error {
    using Error::Error;
};
struct IoFailure : Error {
    using Error::Error;
};
struct ScenarioFailed : Error {
    using Error::Error;
};

} // namespace doq
