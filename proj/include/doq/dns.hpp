// SPDX-License-Identifier: Apache-2.0
//
// RFC 1035 wire codec plus the pieces DoQ layers on top of it: EDNS(0)
// padding (RFC 7830/8467) and the 2-octet length framing shared with DNS
// over TCP (RFC 9250 section 4.2).
//
// The encoder always emits uncompressed names so byte counts are stable;
// the decoder accepts compression pointers for interoperability.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "doq/bytes.hpp"
#include "doq/errors.hpp"

namespace doq {

// Record types / classes / codes used on our paths. Anything else passes
// through opaquely.
inline constexpr std::uint16_t RTYPE_A = 1;
inline constexpr std::uint16_t RTYPE_AAAA = 28;
inline constexpr std::uint16_t RTYPE_OPT = 41;
inline constexpr std::uint16_t QCLASS_IN = 1;

inline constexpr std::uint8_t OPCODE_QUERY = 0;

inline constexpr std::uint8_t RCODE_NOERROR = 0;
inline constexpr std::uint8_t RCODE_FORMERR = 1;
inline constexpr std::uint8_t RCODE_SERVFAIL = 2;
inline constexpr std::uint8_t RCODE_NXDOMAIN = 3;

inline constexpr std::uint16_t EDNS_OPTION_PADDING = 12;
inline constexpr std::uint16_t EDNS_DEFAULT_UDP_PAYLOAD = 1232;

inline constexpr std::size_t MAX_MESSAGE_SIZE = 65535;
inline constexpr std::size_t MAX_LABEL_LENGTH = 63;
inline constexpr std::size_t MAX_NAME_LENGTH = 255; // encoded, incl. length octets and root

/// A domain name as a sequence of labels. The root name has no labels.
/// Label bytes are kept verbatim; comparison folds ASCII case.
class DnsName {
public:
    DnsName() = default;

    explicit DnsName(std::vector<std::string> labels) : labels_(std::move(labels)) {
        validate();
    }

    /// Parse dotted text ("example.org", trailing dot optional, "." = root).
    static DnsName parse(std::string_view text) {
        std::vector<std::string> labels;
        if (text == "." || text.empty()) return DnsName{};
        std::size_t start = 0;
        while (start <= text.size()) {
            std::size_t dot = text.find('.', start);
            if (dot == std::string_view::npos) {
                labels.emplace_back(text.substr(start));
                break;
            }
            if (dot == text.size() - 1) { // trailing dot
                labels.emplace_back(text.substr(start, dot - start));
                break;
            }
            labels.emplace_back(text.substr(start, dot - start));
            start = dot + 1;
        }
        return DnsName{std::move(labels)};
    }

    const std::vector<std::string>& labels() const { return labels_; }
    bool is_root() const { return labels_.empty(); }

    /// Encoded size: one length octet per label plus the terminating root.
    std::size_t encoded_size() const {
        std::size_t n = 1;
        for (const auto& l : labels_) n += 1 + l.size();
        return n;
    }

    std::string to_string() const {
        if (labels_.empty()) return ".";
        std::string s;
        for (const auto& l : labels_) {
            s += l;
            s += '.';
        }
        s.pop_back();
        return s;
    }

    friend bool operator==(const DnsName& a, const DnsName& b) {
        if (a.labels_.size() != b.labels_.size()) return false;
        auto lower = [](unsigned char c) { return std::tolower(c); };
        for (std::size_t i = 0; i < a.labels_.size(); ++i) {
            const auto& x = a.labels_[i];
            const auto& y = b.labels_[i];
            if (x.size() != y.size()) return false;
            for (std::size_t j = 0; j < x.size(); ++j)
                if (lower(x[j]) != lower(y[j])) return false;
        }
        return true;
    }
    friend bool operator!=(const DnsName& a, const DnsName& b) { return !(a == b); }

private:
    void validate() const {
        for (const auto& l : labels_) {
            if (l.empty()) throw InvalidLabel("empty label");
            if (l.size() > MAX_LABEL_LENGTH)
                throw InvalidLabel("label longer than 63 octets: " + l);
        }
        if (encoded_size() > MAX_NAME_LENGTH)
            throw InvalidLabel("name exceeds 255 octets");
    }

    std::vector<std::string> labels_;
};

struct DnsHeader {
    std::uint16_t id = 0;
    bool qr = false;
    std::uint8_t opcode = OPCODE_QUERY; // 4 bits
    bool aa = false;
    bool tc = false;
    bool rd = false;
    bool ra = false;
    std::uint8_t z = 0;     // 3 reserved bits, zero on anything we originate
    std::uint8_t rcode = 0; // 4 bits
    std::uint16_t qdcount = 0;
    std::uint16_t ancount = 0;
    std::uint16_t nscount = 0;
    std::uint16_t arcount = 0;

    friend bool operator==(const DnsHeader&, const DnsHeader&) = default;
};

struct Question {
    DnsName qname;
    std::uint16_t qtype = RTYPE_A;
    std::uint16_t qclass = QCLASS_IN;

    friend bool operator==(const Question&, const Question&) = default;
};

struct ResourceRecord {
    DnsName name;
    std::uint16_t rtype = RTYPE_A;
    std::uint16_t rclass = QCLASS_IN; // for OPT: requestor's UDP payload size
    std::uint32_t ttl = 0;
    Bytes rdata;

    friend bool operator==(const ResourceRecord&, const ResourceRecord&) = default;
};

/// Build an A record for a dotted-quad address string.
inline ResourceRecord make_a_record(const DnsName& name, std::string_view ipv4,
                                    std::uint32_t ttl) {
    ResourceRecord rr;
    rr.name = name;
    rr.rtype = RTYPE_A;
    rr.rclass = QCLASS_IN;
    rr.ttl = ttl;
    unsigned a = 0, b = 0, c = 0, d = 0;
    char extra;
    if (std::sscanf(std::string(ipv4).c_str(), "%u.%u.%u.%u%c", &a, &b, &c, &d, &extra) != 4 ||
        a > 255 || b > 255 || c > 255 || d > 255)
        throw InvalidRecord("bad IPv4 address: " + std::string(ipv4));
    rr.rdata = {static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b),
                static_cast<std::uint8_t>(c), static_cast<std::uint8_t>(d)};
    return rr;
}

struct DnsMessage {
    DnsHeader header;
    std::vector<Question> questions;
    std::vector<ResourceRecord> answers;
    std::vector<ResourceRecord> authorities;
    std::vector<ResourceRecord> additionals;

    friend bool operator==(const DnsMessage&, const DnsMessage&) = default;
};

struct DecodeOptions {
    // Strict mode additionally rejects nonzero reserved bits and unknown
    // opcodes. Forwarding paths stay lenient.
    bool strict = false;
};

namespace detail {

inline void encode_name(Bytes& out, const DnsName& name) {
    for (const auto& label : name.labels()) {
        if (label.empty() || label.size() > MAX_LABEL_LENGTH)
            throw InvalidLabel("label length out of range");
        put_u8(out, static_cast<std::uint8_t>(label.size()));
        out.insert(out.end(), label.begin(), label.end());
    }
    put_u8(out, 0);
    if (name.encoded_size() > MAX_NAME_LENGTH) throw InvalidLabel("name exceeds 255 octets");
}

inline void encode_record(Bytes& out, const ResourceRecord& rr) {
    if (rr.rtype == RTYPE_A && rr.rdata.size() != 4)
        throw InvalidRecord("A record rdata must be exactly 4 octets");
    if (rr.rdata.size() > 65535) throw InvalidRecord("rdata exceeds 65535 octets");
    encode_name(out, rr.name);
    put_u16(out, rr.rtype);
    put_u16(out, rr.rclass);
    put_u32(out, rr.ttl);
    put_u16(out, static_cast<std::uint16_t>(rr.rdata.size()));
    out.insert(out.end(), rr.rdata.begin(), rr.rdata.end());
}

class Reader {
public:
    explicit Reader(BytesView in) : in_(in) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return in_.size() - pos_; }

    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        auto v = get_u16(in_, pos_);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        auto hi = u16();
        return (static_cast<std::uint32_t>(hi) << 16) | u16();
    }
    Bytes bytes(std::size_t n) {
        need(n);
        Bytes b(in_.begin() + pos_, in_.begin() + pos_ + n);
        pos_ += n;
        return b;
    }

    /// Decode a possibly compressed name starting at the cursor.
    DnsName name() {
        std::vector<std::string> labels;
        std::size_t at = pos_;
        bool jumped = false;
        std::size_t encoded_len = 1; // root octet
        while (true) {
            if (at >= in_.size()) throw TruncatedMessage("name runs past end of message");
            std::uint8_t len = in_[at];
            if ((len & 0xc0) == 0xc0) {
                if (at + 1 >= in_.size()) throw TruncatedMessage("truncated compression pointer");
                std::size_t target = (static_cast<std::size_t>(len & 0x3f) << 8) | in_[at + 1];
                // Pointers must reference earlier data; anything else can loop.
                if (target >= at) throw CompressionLoop("compression pointer does not point backwards");
                if (!jumped) pos_ = at + 2;
                jumped = true;
                at = target;
                continue;
            }
            if ((len & 0xc0) != 0) throw InvalidLabel("reserved label type bits");
            if (len == 0) {
                if (!jumped) pos_ = at + 1;
                return DnsName{std::move(labels)};
            }
            if (at + 1 + len > in_.size()) throw TruncatedMessage("label runs past end of message");
            encoded_len += 1 + len;
            if (encoded_len + 1 > MAX_NAME_LENGTH + 1)
                throw InvalidLabel("decoded name exceeds 255 octets");
            labels.emplace_back(reinterpret_cast<const char*>(in_.data() + at + 1), len);
            at += 1 + len;
        }
    }

private:
    void need(std::size_t n) {
        if (pos_ + n > in_.size()) throw TruncatedMessage("message shorter than declared contents");
    }

    BytesView in_;
    std::size_t pos_ = 0;
};

inline ResourceRecord decode_record(Reader& r) {
    ResourceRecord rr;
    rr.name = r.name();
    rr.rtype = r.u16();
    rr.rclass = r.u16();
    rr.ttl = r.u32();
    std::uint16_t rdlen = r.u16();
    rr.rdata = r.bytes(rdlen);
    return rr;
}

} // namespace detail

/// Canonical uncompressed wire encoding. Header counts must match the
/// section lengths.
inline Bytes encode_message(const DnsMessage& msg) {
    const auto& h = msg.header;
    if (h.qdcount != msg.questions.size() || h.ancount != msg.answers.size() ||
        h.nscount != msg.authorities.size() || h.arcount != msg.additionals.size())
        throw CountMismatch("header counts do not match section lengths");

    Bytes out;
    out.reserve(64);
    put_u16(out, h.id);
    std::uint16_t flags = 0;
    flags |= static_cast<std::uint16_t>(h.qr) << 15;
    flags |= static_cast<std::uint16_t>(h.opcode & 0xf) << 11;
    flags |= static_cast<std::uint16_t>(h.aa) << 10;
    flags |= static_cast<std::uint16_t>(h.tc) << 9;
    flags |= static_cast<std::uint16_t>(h.rd) << 8;
    flags |= static_cast<std::uint16_t>(h.ra) << 7;
    flags |= static_cast<std::uint16_t>(h.z & 0x7) << 4;
    flags |= static_cast<std::uint16_t>(h.rcode & 0xf);
    put_u16(out, flags);
    put_u16(out, h.qdcount);
    put_u16(out, h.ancount);
    put_u16(out, h.nscount);
    put_u16(out, h.arcount);

    for (const auto& q : msg.questions) {
        detail::encode_name(out, q.qname);
        put_u16(out, q.qtype);
        put_u16(out, q.qclass);
    }
    for (const auto& rr : msg.answers) detail::encode_record(out, rr);
    for (const auto& rr : msg.authorities) detail::encode_record(out, rr);
    for (const auto& rr : msg.additionals) detail::encode_record(out, rr);

    if (out.size() > MAX_MESSAGE_SIZE)
        throw OversizeMessage("encoded message exceeds 65535 octets");
    return out;
}

inline DnsMessage decode_message(BytesView wire, const DecodeOptions& opts = {}) {
    if (wire.size() < 12) throw TruncatedMessage("shorter than the 12-octet header");
    detail::Reader r(wire);
    DnsMessage msg;
    auto& h = msg.header;
    h.id = r.u16();
    std::uint16_t flags = r.u16();
    h.qr = (flags >> 15) & 1;
    h.opcode = (flags >> 11) & 0xf;
    h.aa = (flags >> 10) & 1;
    h.tc = (flags >> 9) & 1;
    h.rd = (flags >> 8) & 1;
    h.ra = (flags >> 7) & 1;
    h.z = (flags >> 4) & 0x7;
    h.rcode = flags & 0xf;
    if (opts.strict) {
        if (h.z != 0) throw StrictViolation("reserved header bits set");
        if (h.opcode != 0 && h.opcode != 1 && h.opcode != 2 && h.opcode != 4 && h.opcode != 5)
            throw StrictViolation("unknown opcode " + std::to_string(h.opcode));
    }
    h.qdcount = r.u16();
    h.ancount = r.u16();
    h.nscount = r.u16();
    h.arcount = r.u16();

    for (std::uint16_t i = 0; i < h.qdcount; ++i) {
        Question q;
        q.qname = r.name();
        q.qtype = r.u16();
        q.qclass = r.u16();
        msg.questions.push_back(std::move(q));
    }
    for (std::uint16_t i = 0; i < h.ancount; ++i) msg.answers.push_back(detail::decode_record(r));
    for (std::uint16_t i = 0; i < h.nscount; ++i)
        msg.authorities.push_back(detail::decode_record(r));
    for (std::uint16_t i = 0; i < h.arcount; ++i)
        msg.additionals.push_back(detail::decode_record(r));

    if (r.remaining() != 0)
        throw CountMismatch("trailing octets after the last counted section");
    return msg;
}

/// Query construction. The caller picks the transaction id: zero for
/// stream-mode DoQ, nonzero for datagram mode or plain UDP.
inline DnsMessage make_query(const std::string& name, std::uint16_t rtype, std::uint16_t txid,
                             bool recursion_desired) {
    DnsMessage msg;
    msg.header.id = txid;
    msg.header.qr = false;
    msg.header.opcode = OPCODE_QUERY;
    msg.header.rd = recursion_desired;
    msg.header.qdcount = 1;
    Question q;
    q.qname = DnsName::parse(name);
    q.qtype = rtype;
    q.qclass = QCLASS_IN;
    msg.questions.push_back(std::move(q));
    return msg;
}

inline DnsMessage make_response(const DnsMessage& query, std::vector<ResourceRecord> answers,
                                std::uint8_t rcode = RCODE_NOERROR) {
    if (query.header.qr) throw NotAQuery("cannot respond to a response");
    DnsMessage msg;
    msg.header.id = query.header.id;
    msg.header.qr = true;
    msg.header.opcode = query.header.opcode;
    msg.header.rd = query.header.rd;
    msg.header.rcode = rcode;
    msg.questions = query.questions;
    msg.header.qdcount = static_cast<std::uint16_t>(msg.questions.size());
    msg.header.ancount = static_cast<std::uint16_t>(answers.size());
    msg.answers = std::move(answers);
    return msg;
}

namespace detail {

struct EdnsOption {
    std::uint16_t code;
    Bytes data;
};

inline std::vector<EdnsOption> parse_opt_rdata(BytesView rdata) {
    std::vector<EdnsOption> opts;
    std::size_t at = 0;
    while (at < rdata.size()) {
        if (at + 4 > rdata.size()) throw InvalidRecord("malformed OPT rdata");
        std::uint16_t code = get_u16(rdata, at);
        std::uint16_t len = get_u16(rdata, at + 2);
        at += 4;
        if (at + len > rdata.size()) throw InvalidRecord("malformed OPT rdata");
        opts.push_back({code, Bytes(rdata.begin() + at, rdata.begin() + at + len)});
        at += len;
    }
    return opts;
}

inline Bytes build_opt_rdata(const std::vector<EdnsOption>& opts) {
    Bytes rdata;
    for (const auto& o : opts) {
        put_u16(rdata, o.code);
        put_u16(rdata, static_cast<std::uint16_t>(o.data.size()));
        rdata.insert(rdata.end(), o.data.begin(), o.data.end());
    }
    return rdata;
}

} // namespace detail

/// Pad with an EDNS(0) padding option so the encoded length is the smallest
/// multiple of `block` that fits the message plus an empty padding option.
/// Re-applying with the same block is a no-op on the encoded length.
inline DnsMessage apply_padding(const DnsMessage& msg, std::size_t block) {
    if (block < 1) throw std::invalid_argument("padding block must be >= 1");

    DnsMessage padded = msg;
    auto opt = std::find_if(padded.additionals.begin(), padded.additionals.end(),
                            [](const ResourceRecord& rr) { return rr.rtype == RTYPE_OPT; });
    if (opt == padded.additionals.end()) {
        ResourceRecord rr;
        rr.name = DnsName{};
        rr.rtype = RTYPE_OPT;
        rr.rclass = EDNS_DEFAULT_UDP_PAYLOAD;
        rr.ttl = 0;
        padded.additionals.push_back(std::move(rr));
        padded.header.arcount = static_cast<std::uint16_t>(padded.additionals.size());
        opt = padded.additionals.end() - 1;
    }

    auto options = detail::parse_opt_rdata(opt->rdata);
    std::erase_if(options, [](const auto& o) { return o.code == EDNS_OPTION_PADDING; });
    options.push_back({EDNS_OPTION_PADDING, {}});
    opt->rdata = detail::build_opt_rdata(options);

    std::size_t base_len = encode_message(padded).size();
    std::size_t target = ((base_len + block - 1) / block) * block;
    if (target > MAX_MESSAGE_SIZE) throw OversizeMessage("padding would exceed 65535 octets");

    options.back().data.assign(target - base_len, 0);
    opt->rdata = detail::build_opt_rdata(options);
    return padded;
}

/// 2-octet big-endian length prefix, as used on DoQ streams, DoQ datagram
/// payloads, and DNS over TCP.
inline Bytes frame_message(BytesView wire) {
    if (wire.size() > MAX_MESSAGE_SIZE) throw OversizeMessage("frame payload exceeds 65535 octets");
    Bytes out;
    out.reserve(wire.size() + 2);
    put_u16(out, static_cast<std::uint16_t>(wire.size()));
    out.insert(out.end(), wire.begin(), wire.end());
    return out;
}

struct UnframeResult {
    std::vector<Bytes> messages;
    Bytes remainder;
};

/// Extract all complete frames; incomplete trailing data is returned as the
/// remainder so callers can append the next read and try again.
inline UnframeResult unframe_messages(BytesView buffer) {
    UnframeResult res;
    std::size_t at = 0;
    while (buffer.size() - at >= 2) {
        std::size_t len = get_u16(buffer, at);
        if (buffer.size() - at - 2 < len) break;
        res.messages.emplace_back(buffer.begin() + at + 2, buffer.begin() + at + 2 + len);
        at += 2 + len;
    }
    res.remainder.assign(buffer.begin() + at, buffer.end());
    return res;
}

} // namespace doq
