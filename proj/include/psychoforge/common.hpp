#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace psychoforge {

inline constexpr std::string_view kToolkitVersion = "0.3.1";

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Big Five domains. Table order everywhere is O, C, E, A, N.
enum class Domain : std::uint8_t { O, C, E, A, N };

inline constexpr std::array<Domain, 5> kDomains = {Domain::O, Domain::C, Domain::E, Domain::A, Domain::N};

constexpr std::size_t domain_index(Domain d) { return static_cast<std::size_t>(d); }

constexpr char domain_code(Domain d) {
    constexpr std::array<char, 5> codes = {'O', 'C', 'E', 'A', 'N'};
    return codes[domain_index(d)];
}

std::string_view domain_name(Domain d);

/// Accepts the one-letter code or the full domain name (case-insensitive).
std::optional<Domain> parse_domain(std::string_view text);

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input document (JSON, CSV, prompt text).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Well-formed input that violates a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Missing credentials, bad flags, forbidden backend.
class ConfigError : public Error {
public:
    using Error::Error;
};

class NetworkError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace psychoforge
