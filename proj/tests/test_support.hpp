#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <system_error>

#include <unistd.h>

#include "psychoforge/persona.hpp"
#include "psychoforge/scales.hpp"

namespace psychoforge::support {

inline std::filesystem::path data_dir() { return PSYCHOFORGE_DATA_DIR; }
inline std::filesystem::path fixture_dir() { return PSYCHOFORGE_FIXTURE_DIR; }

inline const PromptKit& kit() {
    static const PromptKit k = load_prompt_kit(data_dir());
    return k;
}

inline const ScaleDefinition& bfi2() { return kit().bfi2; }
inline const ScaleDefinition& mini_markers() { return kit().questionnaire; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("psychoforge-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline ResponseVector constant_responses(const ScaleDefinition& scale, int value) {
    ResponseVector r{scale.name(), {}};
    for (const auto& item : scale.items()) r.answers[item.id] = value;
    return r;
}

inline ResponseVector random_responses(const ScaleDefinition& scale, std::mt19937_64& gen) {
    std::uniform_int_distribution<int> dist(scale.response_min(), scale.response_max());
    ResponseVector r{scale.name(), {}};
    for (const auto& item : scale.items()) r.answers[item.id] = dist(gen);
    return r;
}

/// Sets every item of `domain` to its keyed maximum (positives high, reversed low).
inline void set_domain_keyed(ResponseVector& r, const ScaleDefinition& scale, Domain domain, bool high) {
    for (std::size_t i : scale.items_in_domain(domain)) {
        const auto& item = scale.items()[i];
        const bool positive = item.keying == Keying::positive;
        r.answers[item.id] = (positive == high) ? scale.response_max() : scale.response_min();
    }
}

}  // namespace psychoforge::support
