// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "doq/dns.hpp"

using namespace doq;

namespace {

// Frozen vectors from tests/oracle/gen_dns_vectors.js (dns-packet reference
// encoder).
const char* kHeaderOnlyHex = "000001000000000000000000";
const char* kQueryHex = "000001000001000000000000076578616d706c65036f72670000010001";
const char* kQueryPadded128Hex =
    "000001000001000000000001076578616d706c65036f7267000001000100002904d00000000000"
    "58000c00540000000000000000000000000000000000000000000000000000000000000000000000"
    "00000000000000000000000000000000000000000000000000000000000000000000000000000000"
    "000000000000000000";
const char* kResponse4AHex =
    "123481000001000400000000076578616d706c65036f72670000010001076578616d706c65036f72"
    "6700000100010000012c0004c0000201076578616d706c65036f726700000100010000012c0004c0"
    "000202076578616d706c65036f726700000100010000012c0004c0000203076578616d706c65036f"
    "726700000100010000012c0004c0000204";

DnsMessage header_only() {
    DnsMessage msg;
    msg.header.rd = true;
    return msg;
}

} // namespace

TEST(DnsCodec, EncodeHeaderOnly) {
    auto wire = encode_message(header_only());
    EXPECT_EQ(wire.size(), 12u);
    EXPECT_EQ(to_hex(wire), kHeaderOnlyHex);
}

TEST(DnsCodec, EncodeQueryMatchesReference) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    auto wire = encode_message(msg);
    EXPECT_EQ(wire.size(), 29u);
    EXPECT_EQ(to_hex(wire), kQueryHex);
    // question section starts at offset 12
    EXPECT_EQ(to_hex(BytesView(wire).subspan(12)), "076578616d706c65036f72670000010001");
}

TEST(DnsCodec, QueryIdIsCallerChosen) {
    auto zero = encode_message(make_query("example.org", RTYPE_A, 0, true));
    auto nonzero = encode_message(make_query("example.org", RTYPE_A, 0x1234, true));
    ASSERT_EQ(zero.size(), nonzero.size());
    EXPECT_EQ(nonzero[0], 0x12);
    EXPECT_EQ(nonzero[1], 0x34);
    // only the id differs
    EXPECT_TRUE(std::equal(zero.begin() + 2, zero.end(), nonzero.begin() + 2));
}

TEST(DnsCodec, MakeQueryRejectsEmptyLabel) {
    EXPECT_THROW(make_query("a..b", RTYPE_A, 0, true), InvalidLabel);
    EXPECT_THROW(make_query(std::string(64, 'x') + ".org", RTYPE_A, 0, true), InvalidLabel);
}

TEST(DnsCodec, MakeResponseEchoesIdAndQuestion) {
    auto query = make_query("example.org", RTYPE_A, 0x1234, true);
    std::vector<ResourceRecord> answers;
    for (int i = 1; i <= 4; ++i)
        answers.push_back(
            make_a_record(query.questions[0].qname, "192.0.2." + std::to_string(i), 300));
    auto resp = make_response(query, answers);
    EXPECT_TRUE(resp.header.qr);
    EXPECT_EQ(resp.header.id, 0x1234);
    EXPECT_EQ(resp.header.ancount, 4);
    EXPECT_EQ(resp.questions, query.questions);
    EXPECT_EQ(to_hex(encode_message(resp)), kResponse4AHex);
}

TEST(DnsCodec, MakeResponseEmptyAnswersIsNoError) {
    auto query = make_query("example.org", RTYPE_A, 7, true);
    auto resp = make_response(query, {});
    EXPECT_EQ(resp.header.ancount, 0);
    EXPECT_EQ(resp.header.rcode, RCODE_NOERROR);
}

TEST(DnsCodec, MakeResponseRejectsResponses) {
    auto query = make_query("example.org", RTYPE_A, 7, true);
    auto resp = make_response(query, {});
    EXPECT_THROW(make_response(resp, {}), NotAQuery);
}

TEST(DnsCodec, OversizeMessageRejected) {
    DnsMessage msg = make_query("example.org", 16 /* TXT */, 0, true);
    ResourceRecord rr;
    rr.name = msg.questions[0].qname;
    rr.rtype = 16;
    rr.rdata.assign(60000, 0xab);
    msg.answers.push_back(rr);
    msg.answers.push_back(rr);
    msg.header.ancount = 2;
    EXPECT_THROW(encode_message(msg), OversizeMessage);
}

TEST(DnsCodec, EncodeValidatesCountsAndRecords) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    msg.header.qdcount = 2;
    EXPECT_THROW(encode_message(msg), CountMismatch);

    msg = make_query("example.org", RTYPE_A, 0, true);
    ResourceRecord bad_a;
    bad_a.name = msg.questions[0].qname;
    bad_a.rtype = RTYPE_A;
    bad_a.rdata = {1, 2, 3}; // must be 4 octets
    msg.answers.push_back(bad_a);
    msg.header.ancount = 1;
    EXPECT_THROW(encode_message(msg), InvalidRecord);
}

TEST(DnsCodec, DecodeRejectsShortInput) {
    Bytes wire(11, 0);
    EXPECT_THROW(decode_message(wire), TruncatedMessage);
}

TEST(DnsCodec, DecodeAcceptsCompressionPointers) {
    // response whose answer name is a pointer to the question name at offset 12
    Bytes wire = from_hex(kQueryHex);
    wire[2] = 0x84; // qr=1, aa=1 so it reads as a response
    wire[7] = 1;    // ancount=1
    Bytes answer = from_hex("c00c00010001000000780004c6336433");
    wire.insert(wire.end(), answer.begin(), answer.end());
    auto msg = decode_message(wire);
    ASSERT_EQ(msg.answers.size(), 1u);
    EXPECT_EQ(msg.answers[0].name, DnsName::parse("example.org"));
    EXPECT_EQ(msg.answers[0].rdata, (Bytes{0xc6, 0x33, 0x64, 0x33}));
}

TEST(DnsCodec, DecodeDetectsPointerCycle) {
    // question name is a pointer at offset 12 pointing at itself
    Bytes wire = from_hex(kHeaderOnlyHex);
    wire[5] = 1; // qdcount=1
    Bytes question = from_hex("c00c00010001");
    wire.insert(wire.end(), question.begin(), question.end());
    EXPECT_THROW(decode_message(wire), CompressionLoop);
}

TEST(DnsCodec, DecodeRejectsTrailingGarbage) {
    auto wire = encode_message(make_query("example.org", RTYPE_A, 0, true));
    wire.push_back(0x00);
    EXPECT_THROW(decode_message(wire), CountMismatch);
}

TEST(DnsCodec, StrictModeRejectsReservedBits) {
    auto wire = encode_message(make_query("example.org", RTYPE_A, 0, true));
    wire[3] |= 0x40; // set a z bit
    EXPECT_NO_THROW(decode_message(wire));
    EXPECT_THROW(decode_message(wire, {.strict = true}), StrictViolation);
    // lenient decode preserves the bits on re-encode
    auto msg = decode_message(wire);
    EXPECT_EQ(encode_message(msg), wire);
}

TEST(DnsCodec, PaddingReachesBlockMultiple) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    ASSERT_EQ(encode_message(msg).size(), 29u);
    auto padded = apply_padding(msg, 128);
    auto wire = encode_message(padded);
    EXPECT_EQ(wire.size(), 128u);
    EXPECT_EQ(to_hex(wire), kQueryPadded128Hex);
}

TEST(DnsCodec, PaddingIsIdempotentPerBlock) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    auto once = encode_message(apply_padding(msg, 128));
    auto twice = encode_message(apply_padding(apply_padding(msg, 128), 128));
    EXPECT_EQ(once, twice);
}

TEST(DnsCodec, PaddingBlockOneAddsNoFill) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    auto padded = apply_padding(msg, 1);
    // 29 + 11 (OPT) + 4 (empty padding option) and nothing else
    EXPECT_EQ(encode_message(padded).size(), 44u);
}

TEST(DnsCodec, PaddingExactMultipleAddsNoFill) {
    auto msg = make_query("example.org", RTYPE_A, 0, true);
    // with OPT + empty option the message is 44 octets: block 44 needs no fill
    auto padded = apply_padding(msg, 44);
    EXPECT_EQ(encode_message(padded).size(), 44u);
}

TEST(DnsCodec, PaddingOversizeRejected) {
    DnsMessage msg = make_query("example.org", 16, 0, true);
    ResourceRecord rr;
    rr.name = msg.questions[0].qname;
    rr.rtype = 16;
    rr.rdata.assign(65400, 0xab);
    msg.answers.push_back(rr);
    msg.header.ancount = 1;
    EXPECT_THROW(apply_padding(msg, 4096), OversizeMessage);
}

TEST(DnsCodec, FramingPrependsLength) {
    Bytes wire(29, 0xaa);
    auto framed = frame_message(wire);
    ASSERT_EQ(framed.size(), 31u);
    EXPECT_EQ(framed[0], 0x00);
    EXPECT_EQ(framed[1], 0x1d);
}

TEST(DnsCodec, UnframeHandlesPartialFrames) {
    Bytes a(29, 0x11), b(40, 0x22);
    Bytes buf = frame_message(a);
    auto framed_b = frame_message(b);
    buf.insert(buf.end(), framed_b.begin(), framed_b.begin() + 20); // 1.5 frames
    auto res = unframe_messages(buf);
    ASSERT_EQ(res.messages.size(), 1u);
    EXPECT_EQ(res.messages[0], a);
    EXPECT_EQ(res.remainder.size(), 20u);

    auto empty = unframe_messages(Bytes{});
    EXPECT_TRUE(empty.messages.empty());
    EXPECT_TRUE(empty.remainder.empty());
}

TEST(DnsCodec, FramingRoundTripAcrossChunkBoundaries) {
    std::mt19937 rng(7);
    Bytes a(29, 0x11), b(300, 0x22);
    Bytes joined = frame_message(a);
    auto fb = frame_message(b);
    joined.insert(joined.end(), fb.begin(), fb.end());

    for (int trial = 0; trial < 200; ++trial) {
        std::size_t split = std::uniform_int_distribution<std::size_t>(0, joined.size())(rng);
        Bytes pending(joined.begin(), joined.begin() + split);
        auto first = unframe_messages(pending);
        Bytes rest = first.remainder;
        rest.insert(rest.end(), joined.begin() + split, joined.end());
        auto second = unframe_messages(rest);

        std::vector<Bytes> all = first.messages;
        all.insert(all.end(), second.messages.begin(), second.messages.end());
        ASSERT_EQ(all.size(), 2u);
        EXPECT_EQ(all[0], a);
        EXPECT_EQ(all[1], b);
        EXPECT_TRUE(second.remainder.empty());
    }
}

namespace {

// random generator for valid messages, used by the round-trip property
class MessageGen {
public:
    explicit MessageGen(std::uint32_t seed) : rng_(seed) {}

    DnsMessage message() {
        DnsMessage msg;
        auto& h = msg.header;
        h.id = pick(0, 65535);
        h.qr = pick(0, 1);
        h.opcode = static_cast<std::uint8_t>(pick(0, 15));
        h.aa = pick(0, 1);
        h.tc = pick(0, 1);
        h.rd = pick(0, 1);
        h.ra = pick(0, 1);
        h.rcode = static_cast<std::uint8_t>(pick(0, 15));
        int nq = pick(0, 2), na = pick(0, 3), ns = pick(0, 2), nr = pick(0, 2);
        for (int i = 0; i < nq; ++i)
            msg.questions.push_back(
                {name(), static_cast<std::uint16_t>(pick(1, 300)), QCLASS_IN});
        for (int i = 0; i < na; ++i) msg.answers.push_back(record());
        for (int i = 0; i < ns; ++i) msg.authorities.push_back(record());
        for (int i = 0; i < nr; ++i) msg.additionals.push_back(record());
        h.qdcount = static_cast<std::uint16_t>(nq);
        h.ancount = static_cast<std::uint16_t>(na);
        h.nscount = static_cast<std::uint16_t>(ns);
        h.arcount = static_cast<std::uint16_t>(nr);
        return msg;
    }

    DnsName name() {
        int n = pick(0, 4);
        std::vector<std::string> labels;
        for (int i = 0; i < n; ++i) {
            int len = pick(1, 20);
            std::string l;
            for (int j = 0; j < len; ++j) {
                static const char alphabet[] =
                    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_";
                l.push_back(alphabet[pick(0, sizeof(alphabet) - 2)]);
            }
            labels.push_back(std::move(l));
        }
        return DnsName{std::move(labels)};
    }

    ResourceRecord record() {
        ResourceRecord rr;
        rr.name = name();
        rr.ttl = static_cast<std::uint32_t>(pick(0, 1 << 30));
        if (pick(0, 2) == 0) {
            rr.rtype = RTYPE_A;
            rr.rdata = {static_cast<std::uint8_t>(pick(0, 255)),
                        static_cast<std::uint8_t>(pick(0, 255)),
                        static_cast<std::uint8_t>(pick(0, 255)),
                        static_cast<std::uint8_t>(pick(0, 255))};
        } else {
            rr.rtype = static_cast<std::uint16_t>(pick(2, 500));
            if (rr.rtype == RTYPE_A) rr.rtype = 2;
            int len = pick(0, 64);
            rr.rdata.resize(len);
            for (auto& b : rr.rdata) b = static_cast<std::uint8_t>(pick(0, 255));
        }
        return rr;
    }

    int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

    std::mt19937& rng() { return rng_; }

private:
    std::mt19937 rng_;
};

} // namespace

TEST(DnsCodecProperty, RoundTripBitExact) {
    MessageGen gen(20240853);
    for (int i = 0; i < 10000; ++i) {
        auto msg = gen.message();
        auto wire = encode_message(msg);
        auto back = decode_message(wire);
        ASSERT_EQ(back, msg) << "iteration " << i;
        ASSERT_EQ(encode_message(back), wire) << "iteration " << i;
    }
}

TEST(DnsCodecProperty, PaddingAlwaysBlockAligned) {
    MessageGen gen(77);
    for (int i = 0; i < 2000; ++i) {
        auto msg = gen.message();
        // keep preexisting OPT rdata well-formed so padding can parse it
        for (auto& rr : msg.additionals)
            if (rr.rtype == RTYPE_OPT) rr.rdata.clear();
        std::size_t block = static_cast<std::size_t>(gen.pick(1, 512));
        try {
            auto padded = apply_padding(msg, block);
            EXPECT_EQ(encode_message(padded).size() % block, 0u);
        } catch (const OversizeMessage&) {
        }
    }
}

TEST(DnsCodecProperty, DecoderThrowsOnlyTypedErrors) {
    MessageGen gen(4242);
    int decoded = 0, rejected = 0;

    // purely random buffers
    for (int i = 0; i < 30000; ++i) {
        Bytes buf(static_cast<std::size_t>(gen.pick(0, 80)));
        for (auto& b : buf) b = static_cast<std::uint8_t>(gen.pick(0, 255));
        try {
            decode_message(buf);
            ++decoded;
        } catch (const CodecError&) {
            ++rejected;
        }
    }
    // mutated valid encodings: flipped bytes, truncations, extensions
    for (int i = 0; i < 20000; ++i) {
        auto wire = encode_message(gen.message());
        int mutations = gen.pick(1, 4);
        for (int m = 0; m < mutations && !wire.empty(); ++m) {
            switch (gen.pick(0, 2)) {
            case 0:
                wire[static_cast<std::size_t>(gen.pick(0, static_cast<int>(wire.size()) - 1))] =
                    static_cast<std::uint8_t>(gen.pick(0, 255));
                break;
            case 1:
                wire.resize(static_cast<std::size_t>(gen.pick(0, static_cast<int>(wire.size()))));
                break;
            default:
                wire.push_back(static_cast<std::uint8_t>(gen.pick(0, 255)));
                break;
            }
        }
        try {
            decode_message(wire);
            ++decoded;
        } catch (const CodecError&) {
            ++rejected;
        }
    }
    EXPECT_GT(rejected, 0);
    SUCCEED() << decoded << " decoded, " << rejected << " rejected";
}
