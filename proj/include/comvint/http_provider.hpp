#pragma once

// Chat-completions HTTP provider. Wire format:
//   POST {base_url}/chat/completions
//   body: {"model", "messages":[{"role","content"}], "temperature", "max_tokens"}
//   reads: choices[0].message.content, usage.prompt_tokens, usage.completion_tokens
// Bearer token from the COMVINT_API_KEY environment variable.

#include <chrono>
#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/llm_client.hpp"

namespace comvint {

class HttpProvider : public ChatProvider {
public:
    HttpProvider(std::string base_url, std::string api_key,
                 std::chrono::seconds timeout = std::chrono::seconds(120))
        : base_url_(std::move(base_url)), api_key_(std::move(api_key)), timeout_(timeout) {}

    static HttpProvider from_env(const std::string& base_url) {
        const char* key = std::getenv("COMVINT_API_KEY");
        if (!key || !*key)
            throw ConfigInvalid("COMVINT_API_KEY is not set; required for the HTTP provider");
        return HttpProvider(base_url, key);
    }

    ChatResponse complete(const ChatRequest& request) override {
        request.validate();
        nlohmann::json body;
        body["model"] = request.model;
        nlohmann::json messages = nlohmann::json::array();
        for (const auto& m : request.messages)
            messages.push_back({{"role", m.role}, {"content", m.content}});
        body["messages"] = messages;
        body["temperature"] = request.temperature;
        body["max_tokens"] = request.max_tokens;

        httplib::Client client(base_url_);
        client.set_connection_timeout(timeout_);
        client.set_read_timeout(timeout_);
        httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};

        auto started = std::chrono::steady_clock::now();
        auto res = client.Post("/chat/completions", headers, body.dump(), "application/json");
        auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - started);

        if (!res)
            throw TransientError("network failure: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw TransientError("HTTP " + std::to_string(res->status) + " from provider");
        if (res->status >= 400)
            throw PermanentError("HTTP " + std::to_string(res->status) + ": " + res->body);

        nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
        if (parsed.is_discarded())
            throw PermanentError("provider returned non-JSON body");
        try {
            ChatResponse out;
            out.content = parsed.at("choices").at(0).at("message").at("content").get<std::string>();
            if (parsed.contains("usage")) {
                out.prompt_tokens = parsed["usage"].value("prompt_tokens", size_t{0});
                out.completion_tokens = parsed["usage"].value("completion_tokens", size_t{0});
            }
            out.latency = latency;
            out.provider = name();
            return out;
        } catch (const nlohmann::json::exception& e) {
            throw PermanentError(std::string("malformed provider response: ") + e.what());
        }
    }

    std::string name() const override { return "http:" + base_url_; }

private:
    std::string base_url_;
    std::string api_key_;
    std::chrono::seconds timeout_;
};

}  // namespace comvint
