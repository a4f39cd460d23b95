#pragma once

// Chat-completion providers: a deterministic scripted mock, an HTTP
// provider speaking the chat-completions wire format, and composable retry
// and token-bucket rate-limiting wrappers. Also the strict parsers for
// synthesis output, verdicts and multi-choice conversions, plus cost
// accounting.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/util.hpp"

namespace comvint {

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 1.0;
    int max_tokens = 1024;

    /// Stable content fingerprint: identical across processes and
    /// platforms for identical (model, messages, temperature, max_tokens),
    /// with line endings normalized.
    std::string fingerprint() const {
        std::string canon = model;
        canon += '\x1f';
        canon += format_double(temperature);
        canon += '\x1f';
        canon += std::to_string(max_tokens);
        for (const auto& m : messages) {
            canon += '\x1e';
            canon += m.role;
            canon += '\x1f';
            canon += normalize_newlines(m.content);
        }
        return fingerprint_hex(canon);
    }

    void validate() const {
        if (messages.empty()) throw PreconditionViolation("chat request needs >= 1 message");
        if (messages.back().role != "user")
            throw PreconditionViolation("last chat message must have role 'user'");
        if (temperature < 0.0 || temperature > 2.0)
            throw PreconditionViolation("temperature must be in [0, 2]");
        if (max_tokens <= 0) throw PreconditionViolation("max_tokens must be positive");
    }
};

struct ChatResponse {
    std::string content;
    size_t prompt_tokens = 0;
    size_t completion_tokens = 0;
    std::chrono::milliseconds latency{0};
    std::string provider;
};

class ChatProvider {
public:
    virtual ~ChatProvider() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Mock provider. Two modes: fingerprint-keyed (order independent, used by
// the golden/resume fixtures) and sequential (simple unit tests).

struct ScriptEntry {
    std::optional<std::string> fingerprint;
    std::string content;
    std::optional<size_t> prompt_tokens;
    std::optional<size_t> completion_tokens;
};

inline std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
    std::vector<ScriptEntry> entries;
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON in mock script", line_no);
        ScriptEntry e;
        if (j.contains("fingerprint")) e.fingerprint = j["fingerprint"].get<std::string>();
        if (!j.contains("content")) throw SchemaViolation("script entry missing 'content'", line_no);
        e.content = j["content"].get<std::string>();
        if (j.contains("prompt_tokens")) e.prompt_tokens = j["prompt_tokens"].get<size_t>();
        if (j.contains("completion_tokens"))
            e.completion_tokens = j["completion_tokens"].get<size_t>();
        entries.push_back(std::move(e));
    }
    return entries;
}

class MockProvider : public ChatProvider {
public:
    enum class Mode { fingerprint_keyed, sequential };

    MockProvider(std::vector<ScriptEntry> entries, Mode mode) : mode_(mode) {
        for (auto& e : entries) {
            if (mode_ == Mode::fingerprint_keyed) {
                if (!e.fingerprint)
                    throw ConfigInvalid("fingerprint-keyed mock script entry lacks a fingerprint");
                keyed_[*e.fingerprint] = e;
            } else {
                queue_.push_back(e);
            }
        }
    }

    /// Keyed when any entry carries a fingerprint, sequential otherwise.
    static std::shared_ptr<MockProvider> from_file(const std::filesystem::path& path) {
        auto entries = load_script(path);
        bool keyed = false;
        for (const auto& e : entries)
            if (e.fingerprint) keyed = true;
        return std::make_shared<MockProvider>(
            std::move(entries), keyed ? Mode::fingerprint_keyed : Mode::sequential);
    }

    ChatResponse complete(const ChatRequest& request) override {
        request.validate();
        std::lock_guard<std::mutex> lock(mutex_);
        ++calls_;
        ScriptEntry entry;
        if (mode_ == Mode::fingerprint_keyed) {
            auto it = keyed_.find(request.fingerprint());
            if (it == keyed_.end())
                throw ScriptExhausted("no scripted response for fingerprint " +
                                      request.fingerprint());
            entry = it->second;
        } else {
            if (queue_.empty()) throw ScriptExhausted("sequential mock script exhausted");
            entry = queue_.front();
            queue_.pop_front();
        }
        ChatResponse resp;
        resp.content = entry.content;
        size_t prompt_len = 0;
        for (const auto& m : request.messages) prompt_len += m.content.size();
        resp.prompt_tokens = entry.prompt_tokens.value_or(prompt_len / 4 + 1);
        resp.completion_tokens = entry.completion_tokens.value_or(entry.content.size() / 4 + 1);
        resp.provider = name();
        return resp;
    }

    std::string name() const override { return "mock"; }
    size_t calls() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return calls_;
    }

private:
    Mode mode_;
    std::map<std::string, ScriptEntry> keyed_;
    std::deque<ScriptEntry> queue_;
    mutable std::mutex mutex_;
    size_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// Retry wrapper: exponential backoff with deterministic seeded jitter.
// Only Transient errors are retried; Permanent errors pass through.

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds base_delay{250};
    double multiplier = 2.0;
    uint64_t jitter_seed = 0;
};

class RetryProvider : public ChatProvider {
public:
    RetryProvider(std::shared_ptr<ChatProvider> inner, RetryPolicy policy)
        : inner_(std::move(inner)), policy_(policy), jitter_rng_(policy.jitter_seed) {
        if (policy_.max_attempts < 1)
            throw ConfigInvalid("retry max_attempts must be >= 1");
    }

    ChatResponse complete(const ChatRequest& request) override {
        for (int attempt = 1;; ++attempt) {
            try {
                return inner_->complete(request);
            } catch (const TransientError&) {
                if (attempt >= policy_.max_attempts) throw;
                std::this_thread::sleep_for(delay_for(attempt));
            }
            // Permanent and every other error type propagate immediately
        }
    }

    std::string name() const override { return inner_->name(); }

private:
    std::chrono::milliseconds delay_for(int attempt) {
        double base = static_cast<double>(policy_.base_delay.count());
        double backoff = base * std::pow(policy_.multiplier, attempt - 1);
        double jitter;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            jitter = rng_unit(jitter_rng_) * base;  // in [0, base_delay)
        }
        return std::chrono::milliseconds(static_cast<long long>(backoff + jitter));
    }

    std::shared_ptr<ChatProvider> inner_;
    RetryPolicy policy_;
    std::mt19937_64 jitter_rng_;
    std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Token-bucket rate limiter with FIFO admission.

struct RateLimit {
    double capacity = 1;
    double refill_per_second = 1;
};

class TokenBucket {
public:
    explicit TokenBucket(RateLimit limit) : limit_(limit), tokens_(limit.capacity) {
        if (limit.capacity < 1) throw ConfigInvalid("rate limit capacity must be >= 1");
        if (limit.refill_per_second <= 0)
            throw ConfigInvalid("rate limit refill_per_second must be > 0");
        last_refill_ = clock::now();
    }

    /// Blocks until a token is available; callers are admitted in arrival
    /// order (FIFO by ticket).
    void acquire() {
        std::unique_lock<std::mutex> lock(mutex_);
        const uint64_t ticket = next_ticket_++;
        for (;;) {
            refill();
            if (ticket == serving_ && tokens_ >= 1.0) break;
            if (ticket == serving_) {
                double wait_s = (1.0 - tokens_) / limit_.refill_per_second;
                cv_.wait_for(lock, std::chrono::duration<double>(wait_s));
            } else {
                cv_.wait(lock);
            }
        }
        tokens_ -= 1.0;
        ++serving_;
        lock.unlock();
        cv_.notify_all();
    }

private:
    using clock = std::chrono::steady_clock;

    void refill() {
        auto now = clock::now();
        double elapsed = std::chrono::duration<double>(now - last_refill_).count();
        last_refill_ = now;
        tokens_ = std::min(limit_.capacity, tokens_ + elapsed * limit_.refill_per_second);
    }

    RateLimit limit_;
    double tokens_;
    clock::time_point last_refill_;
    uint64_t next_ticket_ = 0;
    uint64_t serving_ = 0;
    std::mutex mutex_;
    std::condition_variable cv_;
};

class RateLimitedProvider : public ChatProvider {
public:
    RateLimitedProvider(std::shared_ptr<ChatProvider> inner, RateLimit limit)
        : inner_(std::move(inner)), bucket_(limit) {}

    ChatResponse complete(const ChatRequest& request) override {
        bucket_.acquire();
        return inner_->complete(request);
    }

    std::string name() const override { return inner_->name(); }

private:
    std::shared_ptr<ChatProvider> inner_;
    TokenBucket bucket_;
};

// ---------------------------------------------------------------------------
// Response parsers.

using InstructionPair = std::pair<std::string, std::string>;

/// Extracts "Question k:" / "Answer k:" pairs for k = 1..expected_count.
/// Anything other than exactly expected_count complete, consecutively
/// numbered pairs is a ParseMismatch carrying the count actually found.
inline std::vector<InstructionPair> parse_synthesis_response(const std::string& text,
                                                             size_t expected_count) {
    if (expected_count < 1) throw PreconditionViolation("expected_count must be >= 1");
    static const std::regex marker(R"(^\s*(Question|Answer|Option)\s*(\d+|[A-D])\s*:\s*(.*)$)",
                                   std::regex::icase);
    struct Block {
        std::string kind;
        std::string index;
        std::string text;
    };
    std::vector<Block> blocks;
    for (const auto& line : split_lines(normalize_newlines(text))) {
        std::smatch m;
        if (std::regex_match(line, m, marker)) {
            blocks.push_back({to_lower_ascii(m[1].str()), m[2].str(), m[3].str()});
        } else if (!blocks.empty()) {
            blocks.back().text += "\n" + line;
        }
    }
    std::vector<InstructionPair> pairs;
    size_t i = 0;
    while (i + 1 < blocks.size()) {
        const std::string k = std::to_string(pairs.size() + 1);
        const Block& q = blocks[i];
        const Block& a = blocks[i + 1];
        if (q.kind != "question" || q.index != k) break;
        if (a.kind != "answer" || a.index != k) break;
        std::string qt = trim(q.text);
        std::string at = trim(a.text);
        if (qt.empty() || at.empty()) break;
        pairs.emplace_back(std::move(qt), std::move(at));
        i += 2;
    }
    if (pairs.size() != expected_count || i != blocks.size())
        throw ParseMismatch(pairs.size(), expected_count);
    return pairs;
}

enum class Verdict { pass, fail };

/// Scans for the last "Verdict:" line; yes/pass -> pass, no/fail -> fail.
inline Verdict parse_verdict(const std::string& text) {
    static const std::regex verdict_re(R"(^\s*Verdict\s*:\s*(.+?)\s*$)", std::regex::icase);
    std::optional<Verdict> result;
    for (const auto& line : split_lines(normalize_newlines(text))) {
        std::smatch m;
        if (!std::regex_match(line, m, verdict_re)) continue;
        std::string word = to_lower_ascii(m[1].str());
        while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.back())))
            word.pop_back();
        if (word == "yes" || word == "pass")
            result = Verdict::pass;
        else if (word == "no" || word == "fail")
            result = Verdict::fail;
    }
    if (!result) throw UnparseableVerdict("no 'Verdict:' line found");
    return *result;
}

struct MultiChoiceConversion {
    std::string question;
    std::vector<std::string> options;  // exactly 4
    int correct_option = 0;
};

/// Parses the multi-choice reformulation layout: Question 1, Options A-D,
/// Answer 1 with the correct letter.
inline MultiChoiceConversion parse_multichoice_response(const std::string& text) {
    static const std::regex q_re(R"(^\s*Question\s*1\s*:\s*(.*)$)", std::regex::icase);
    static const std::regex opt_re(R"(^\s*Option\s*([A-D])\s*:\s*(.*)$)", std::regex::icase);
    static const std::regex ans_re(R"(^\s*Answer\s*1\s*:\s*(.*)$)", std::regex::icase);
    MultiChoiceConversion out;
    out.options.assign(4, "");
    bool have_q = false, have_ans = false;
    std::array<bool, 4> have_opt{};
    int correct = -1;
    for (const auto& line : split_lines(normalize_newlines(text))) {
        std::smatch m;
        if (std::regex_match(line, m, q_re)) {
            out.question = trim(m[1].str());
            have_q = true;
        } else if (std::regex_match(line, m, opt_re)) {
            int idx = std::toupper(static_cast<unsigned char>(m[1].str()[0])) - 'A';
            out.options[static_cast<size_t>(idx)] = trim(m[2].str());
            have_opt[static_cast<size_t>(idx)] = true;
        } else if (std::regex_match(line, m, ans_re)) {
            std::string ans = trim(m[1].str());
            if (!ans.empty()) {
                char c = static_cast<char>(std::toupper(static_cast<unsigned char>(ans[0])));
                if (c >= 'A' && c <= 'D') correct = c - 'A';
            }
            have_ans = true;
        }
    }
    if (!have_q || out.question.empty()) throw ParseError("multi-choice conversion: no question");
    for (size_t i = 0; i < 4; ++i)
        if (!have_opt[i] || out.options[i].empty())
            throw ParseError("multi-choice conversion: missing option " +
                             std::string(1, static_cast<char>('A' + i)));
    if (!have_ans || correct < 0)
        throw ParseError("multi-choice conversion: missing or unparsable answer letter");
    out.correct_option = correct;
    return out;
}

// ---------------------------------------------------------------------------
// Cost accounting.

struct ModelPrice {
    double prompt_per_1k = 0.0;
    double completion_per_1k = 0.0;
};

using PriceTable = std::map<std::string, ModelPrice>;

struct ModelUsage {
    size_t prompt_tokens = 0;
    size_t completion_tokens = 0;
    double cost = 0.0;
};

class CostLedger {
public:
    void record(const std::string& model, const ChatResponse& response, const PriceTable& prices) {
        auto it = prices.find(model);
        if (it == prices.end()) throw UnknownModel("model '" + model + "' not in price table");
        if (response.prompt_tokens == 0 && response.completion_tokens == 0) return;
        std::lock_guard<std::mutex> lock(mutex_);
        ModelUsage& usage = totals_[model];
        usage.prompt_tokens += response.prompt_tokens;
        usage.completion_tokens += response.completion_tokens;
        usage.cost += static_cast<double>(response.prompt_tokens) * it->second.prompt_per_1k / 1000.0 +
                      static_cast<double>(response.completion_tokens) * it->second.completion_per_1k / 1000.0;
    }

    std::map<std::string, ModelUsage> totals() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return totals_;
    }

    double total_cost() const {
        std::lock_guard<std::mutex> lock(mutex_);
        double sum = 0;
        for (const auto& [_, u] : totals_) sum += u.cost;
        return sum;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [model, u] : totals())
            j[model] = {{"prompt_tokens", u.prompt_tokens},
                        {"completion_tokens", u.completion_tokens},
                        {"cost", u.cost}};
        return j;
    }

    /// One record per model, newline-delimited.
    std::string to_record_stream() const {
        std::string out;
        for (const auto& [model, u] : totals()) {
            out += nlohmann::json{{"model", model},
                                  {"prompt_tokens", u.prompt_tokens},
                                  {"completion_tokens", u.completion_tokens},
                                  {"cost", u.cost}}
                       .dump();
            out += '\n';
        }
        return out;
    }

    void load_json(const nlohmann::json& j) {
        std::lock_guard<std::mutex> lock(mutex_);
        totals_.clear();
        for (auto it = j.begin(); it != j.end(); ++it)
            totals_[it.key()] = ModelUsage{it.value()["prompt_tokens"].get<size_t>(),
                                           it.value()["completion_tokens"].get<size_t>(),
                                           it.value()["cost"].get<double>()};
    }

private:
    std::map<std::string, ModelUsage> totals_;
    mutable std::mutex mutex_;
};

inline void record_cost(CostLedger& ledger, const std::string& model, const ChatResponse& response,
                        const PriceTable& prices) {
    ledger.record(model, response, prices);
}

// ---------------------------------------------------------------------------
// Run log: append-only stream of provider exchanges.

struct RunLogEntry {
    std::string stage;
    std::string item;  // record_id or image_id the call was made for
    std::string fingerprint;
    std::string response_digest;
    size_t prompt_tokens = 0;
    size_t completion_tokens = 0;
    std::string model;
    std::string outcome;  // ok | transient_error | permanent_error | parse_mismatch | ...
};

inline nlohmann::json runlog_entry_to_json(const RunLogEntry& e) {
    return nlohmann::json{{"stage", e.stage},
                          {"item", e.item},
                          {"fingerprint", e.fingerprint},
                          {"response_digest", e.response_digest},
                          {"prompt_tokens", e.prompt_tokens},
                          {"completion_tokens", e.completion_tokens},
                          {"model", e.model},
                          {"outcome", e.outcome}};
}

inline RunLogEntry runlog_entry_from_json(const nlohmann::json& j) {
    RunLogEntry e;
    e.stage = j.value("stage", "");
    e.item = j.value("item", "");
    e.fingerprint = j.value("fingerprint", "");
    e.response_digest = j.value("response_digest", "");
    e.prompt_tokens = j.value("prompt_tokens", size_t{0});
    e.completion_tokens = j.value("completion_tokens", size_t{0});
    e.model = j.value("model", "");
    e.outcome = j.value("outcome", "");
    return e;
}

}  // namespace comvint
