#pragma once

#include <chrono>
#include <string>

#include <nlohmann/json.hpp>

namespace psychoforge::detail {

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{500};
    double backoff_factor = 2.0;
    std::chrono::seconds timeout{120};
};

struct JsonResponse {
    nlohmann::json body;
    int attempts = 0;
};

/// POST `payload` to `{api_base}{path}` with a bearer token. Transport
/// errors, 429 and 5xx are retried with exponential backoff; other statuses
/// and exhausted retries raise NetworkError.
JsonResponse post_json(const std::string& api_base, const std::string& path, const std::string& api_key,
                       const nlohmann::json& payload, const RetryPolicy& policy, const std::string& context);

}  // namespace psychoforge::detail
