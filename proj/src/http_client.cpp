#include "http_client.hpp"

// Eigen before httplib: <resolv.h> defines a `_res` macro that breaks Eigen headers.
#include "psychoforge/common.hpp"

#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

namespace psychoforge::detail {

JsonResponse post_json(const std::string& api_base, const std::string& path, const std::string& api_key,
                       const nlohmann::json& payload, const RetryPolicy& policy, const std::string& context) {
    const auto scheme = api_base.find("://");
    if (scheme == std::string::npos) throw ConfigError(fmt::format("API base '{}' lacks a scheme", api_base));
    const auto path_start = api_base.find('/', scheme + 3);
    const std::string origin = api_base.substr(0, path_start);
    std::string full_path = path_start == std::string::npos ? std::string() : api_base.substr(path_start);
    while (!full_path.empty() && full_path.back() == '/') full_path.pop_back();
    full_path += path;

    const std::string body = payload.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    const httplib::Headers headers = {{"Authorization", "Bearer " + api_key}};
    const int max_attempts = policy.max_retries + 1;
    auto delay = policy.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        httplib::Client client(origin);
        client.set_connection_timeout(policy.timeout);
        client.set_read_timeout(policy.timeout);
        auto res = client.Post(full_path, headers, body, "application/json");
        if (!res) {
            last_error = fmt::format("transport error: {}", httplib::to_string(res.error()));
        } else if (res->status == 200) {
            auto doc = nlohmann::json::parse(res->body, nullptr, false);
            if (doc.is_discarded()) throw NetworkError(fmt::format("{}: endpoint returned non-JSON body", context));
            return {std::move(doc), attempt};
        } else if (res->status == 429 || res->status >= 500) {
            last_error = fmt::format("HTTP {}", res->status);
        } else {
            throw NetworkError(fmt::format("{}: HTTP {}: {}", context, res->status, res->body.substr(0, 200)));
        }
        if (attempt < max_attempts) {
            spdlog::warn("{}: {} (attempt {}/{}), retrying in {} ms", context, last_error, attempt, max_attempts,
                         delay.count());
            std::this_thread::sleep_for(delay);
            delay = std::chrono::milliseconds(
                static_cast<long long>(static_cast<double>(delay.count()) * policy.backoff_factor));
        }
    }
    throw NetworkError(fmt::format("{}: giving up after {} attempts ({})", context, max_attempts, last_error));
}

}  // namespace psychoforge::detail
