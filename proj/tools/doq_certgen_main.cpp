// SPDX-License-Identifier: Apache-2.0
//
// doq-certgen: write a fresh self-signed P-256 identity as PEM files, for
// serving with --cert/--key instead of the proxy's startup-generated one.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "doq/tls.hpp"

int main(int argc, char** argv) {
    CLI::App app{"self-signed certificate generator"};

    std::string hostname = "localhost";
    std::string cert_path = "doq_cert.pem";
    std::string key_path = "doq_key.pem";
    app.add_option("--hostname", hostname, "certificate subject / SAN")
        ->capture_default_str();
    app.add_option("--cert", cert_path, "certificate output path")->capture_default_str();
    app.add_option("--key", key_path, "private key output path")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        doq::ServerIdentity id = doq::ServerIdentity::self_signed(hostname);
        doq::save_cert_pem(*id.cert, cert_path);
        doq::save_private_key_pem(*id.key, key_path);
        std::cout << "wrote " << cert_path << " and " << key_path << " for \"" << hostname
                  << "\"\n";
        return 0;
    } catch (const doq::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
