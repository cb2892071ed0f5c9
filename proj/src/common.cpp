#include "psychoforge/common.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "psychoforge/rng.hpp"

namespace psychoforge {

std::string_view domain_name(Domain d) {
    switch (d) {
        case Domain::O: return "Openness";
        case Domain::C: return "Conscientiousness";
        case Domain::E: return "Extraversion";
        case Domain::A: return "Agreeableness";
        case Domain::N: return "Neuroticism";
    }
    return "?";
}

std::optional<Domain> parse_domain(std::string_view text) {
    std::string lower;
    lower.reserve(text.size());
    for (char c : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    for (Domain d : kDomains) {
        std::string code(1, static_cast<char>(std::tolower(domain_code(d))));
        std::string name(domain_name(d));
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
        if (lower == code || lower == name) return d;
    }
    return std::nullopt;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

}  // namespace psychoforge
