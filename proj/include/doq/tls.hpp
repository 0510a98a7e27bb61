// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <memory>
#include <string>

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/rand.h>
#include <openssl/sha.h>
#include <openssl/x509v3.h>

#include "doq/bytes.hpp"
#include "doq/errors.hpp"

namespace doq {

namespace detail {

struct EvpKeyDeleter {
    void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
struct X509Deleter {
    void operator()(X509* p) const { X509_free(p); }
};

[[noreturn]] inline void throw_openssl(const std::string& where) {
    char buf[256] = {};
    ERR_error_string_n(ERR_get_error(), buf, sizeof(buf));
    throw CryptoError(where + ": " + buf);
}

} // namespace detail

using EvpKeyPtr = std::unique_ptr<EVP_PKEY, detail::EvpKeyDeleter>;
using X509Ptr = std::unique_ptr<X509, detail::X509Deleter>;

inline Bytes sha256(BytesView data) {
    Bytes digest(SHA256_DIGEST_LENGTH);
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
        detail::throw_openssl("sha256");
    digest.resize(len);
    return digest;
}

inline EvpKeyPtr generate_p256_key() {
    std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
        EVP_PKEY_CTX_new_id(EVP_PKEY_EC, nullptr), EVP_PKEY_CTX_free);
    if (!ctx || EVP_PKEY_keygen_init(ctx.get()) != 1 ||
        EVP_PKEY_CTX_set_ec_paramgen_curve_nid(ctx.get(), NID_X9_62_prime256v1) != 1)
        detail::throw_openssl("keygen init");
    EVP_PKEY* raw = nullptr;
    if (EVP_PKEY_keygen(ctx.get(), &raw) != 1) detail::throw_openssl("keygen");
    return EvpKeyPtr(raw);
}

// Self-signed end-entity certificate with CN and a matching dNSName SAN, so
// both legacy CN matching and modern host checks accept it.
inline X509Ptr make_self_signed_cert(EVP_PKEY& key, const std::string& hostname,
                                     int valid_days = 365) {
    X509Ptr cert(X509_new());
    if (!cert) detail::throw_openssl("X509_new");
    X509_set_version(cert.get(), 2);
    std::uint64_t serial = 0;
    RAND_bytes(reinterpret_cast<unsigned char*>(&serial), sizeof(serial));
    ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert.get()), serial | 1);
    X509_gmtime_adj(X509_getm_notBefore(cert.get()), -3600);
    X509_gmtime_adj(X509_getm_notAfter(cert.get()), 3600L * 24 * valid_days);
    X509_set_pubkey(cert.get(), &key);

    X509_NAME* name = X509_get_subject_name(cert.get());
    X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                               reinterpret_cast<const unsigned char*>(hostname.c_str()), -1,
                               -1, 0);
    X509_set_issuer_name(cert.get(), name);

    std::string san = "DNS:" + hostname;
    X509_EXTENSION* ext =
        X509V3_EXT_conf_nid(nullptr, nullptr, NID_subject_alt_name, san.c_str());
    if (!ext) detail::throw_openssl("SAN extension");
    X509_add_ext(cert.get(), ext, -1);
    X509_EXTENSION_free(ext);

    if (!X509_sign(cert.get(), &key, EVP_sha256())) detail::throw_openssl("X509_sign");
    return cert;
}

inline Bytes cert_to_der(X509& cert) {
    unsigned char* out = nullptr;
    int len = i2d_X509(&cert, &out);
    if (len <= 0) detail::throw_openssl("i2d_X509");
    Bytes der(out, out + len);
    OPENSSL_free(out);
    return der;
}

inline X509Ptr cert_from_der(BytesView der) {
    const unsigned char* p = der.data();
    X509Ptr cert(d2i_X509(nullptr, &p, static_cast<long>(der.size())));
    if (!cert) throw CryptoError("certificate DER parse failed");
    return cert;
}

// ECDSA-with-SHA256 over arbitrary bytes; DER-encoded signature.
inline Bytes sign_message(EVP_PKEY& key, BytesView data) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                EVP_MD_CTX_free);
    if (!ctx || EVP_DigestSignInit(ctx.get(), nullptr, EVP_sha256(), nullptr, &key) != 1)
        detail::throw_openssl("sign init");
    std::size_t len = 0;
    if (EVP_DigestSign(ctx.get(), nullptr, &len, data.data(), data.size()) != 1)
        detail::throw_openssl("sign size");
    Bytes sig(len);
    if (EVP_DigestSign(ctx.get(), sig.data(), &len, data.data(), data.size()) != 1)
        detail::throw_openssl("sign");
    sig.resize(len);
    return sig;
}

inline bool verify_message(EVP_PKEY& pubkey, BytesView data, BytesView signature) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                EVP_MD_CTX_free);
    if (!ctx || EVP_DigestVerifyInit(ctx.get(), nullptr, EVP_sha256(), nullptr, &pubkey) != 1)
        detail::throw_openssl("verify init");
    return EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), data.data(),
                            data.size()) == 1;
}

inline bool cert_matches_host(X509& cert, const std::string& hostname) {
    return X509_check_host(&cert, hostname.c_str(), hostname.size(), 0, nullptr) == 1;
}

inline EvpKeyPtr cert_public_key(X509& cert) {
    EvpKeyPtr key(X509_get_pubkey(&cert));
    if (!key) detail::throw_openssl("X509_get_pubkey");
    return key;
}

// --- PEM file round-trips ---

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoFailure("cannot open " + path);
    return f;
}
} // namespace detail

inline void save_private_key_pem(EVP_PKEY& key, const std::string& path) {
    auto f = detail::open_file(path, "w");
    if (PEM_write_PrivateKey(f.get(), &key, nullptr, nullptr, 0, nullptr, nullptr) != 1)
        detail::throw_openssl("PEM_write_PrivateKey");
}

inline EvpKeyPtr load_private_key_pem(const std::string& path) {
    auto f = detail::open_file(path, "r");
    EvpKeyPtr key(PEM_read_PrivateKey(f.get(), nullptr, nullptr, nullptr));
    if (!key) detail::throw_openssl("PEM_read_PrivateKey " + path);
    return key;
}

inline void save_cert_pem(X509& cert, const std::string& path) {
    auto f = detail::open_file(path, "w");
    if (PEM_write_X509(f.get(), &cert) != 1) detail::throw_openssl("PEM_write_X509");
}

inline X509Ptr load_cert_pem(const std::string& path) {
    auto f = detail::open_file(path, "r");
    X509Ptr cert(PEM_read_X509(f.get(), nullptr, nullptr, nullptr));
    if (!cert) detail::throw_openssl("PEM_read_X509 " + path);
    return cert;
}

// Server identity bundle used by listeners.
struct ServerIdentity {
    EvpKeyPtr key;
    X509Ptr cert;
    Bytes cert_der;

    static ServerIdentity self_signed(const std::string& hostname) {
        ServerIdentity id;
        id.key = generate_p256_key();
        id.cert = make_self_signed_cert(*id.key, hostname);
        id.cert_der = cert_to_der(*id.cert);
        return id;
    }

    static ServerIdentity from_files(const std::string& cert_path,
                                     const std::string& key_path) {
        ServerIdentity id;
        id.key = load_private_key_pem(key_path);
        id.cert = load_cert_pem(cert_path);
        id.cert_der = cert_to_der(*id.cert);
        return id;
    }
};

} // namespace doq
