#pragma once

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

#include <json.hpp>

#include "layoutdiff/llm_client.hpp"

namespace layoutdiff {

// Chat-completion client speaking the common OpenAI-style JSON shape.
// Split into its own header so offline builds never pull in httplib.
class HttpLlmClient : public LlmClient {
public:
    explicit HttpLlmClient(LlmOptions options) : options_(std::move(options)) {}

    std::string complete(const std::string& system_prompt, const std::string& user_prompt) override {
        NetworkGuard::note_attempt();
        const auto [base, path] = split_endpoint(options_.endpoint);
        httplib::Client client(base);
        client.set_read_timeout(120, 0);
        httplib::Headers headers;
        const std::string key = options_.api_key();
        if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
        nlohmann::json body = {
            {"model", options_.model},
            {"temperature", options_.temperature},
            {"messages",
             {{{"role", "system"}, {"content", system_prompt}},
              {{"role", "user"}, {"content", user_prompt}}}},
        };
        auto res = client.Post(path, headers, body.dump(), "application/json");
        if (!res) throw LlmError("LLM request to '" + options_.endpoint + "' failed (no response)");
        if (res->status != 200) {
            throw LlmError("LLM request failed with status " + std::to_string(res->status));
        }
        try {
            auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw LlmError(std::string("unexpected LLM response shape: ") + e.what());
        }
    }

private:
    static std::pair<std::string, std::string> split_endpoint(const std::string& url) {
        const auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) throw ConfigError("LLM endpoint must be a full URL");
        const auto path_start = url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) return {url, "/"};
        return {url.substr(0, path_start), url.substr(path_start)};
    }

    LlmOptions options_;
};

}  // namespace layoutdiff
