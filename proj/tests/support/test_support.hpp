#pragma once

// Shared test machinery: corpus/record builders, a deterministic
// rule-based responder that stands in for the LLM side of the
// conversation, a recording wrapper that captures fingerprint-keyed
// scripts, and a kill switch for resume tests.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "comvint/annotations.hpp"
#include "comvint/llm_client.hpp"
#include "comvint/records.hpp"
#include "comvint/util.hpp"

namespace test_support {

using namespace comvint;

inline AnnotatedImage make_image(const std::string& id, std::vector<std::string> captions,
                                 std::vector<std::string> object_names) {
    AnnotatedImage img;
    img.image_id = id;
    img.captions = std::move(captions);
    for (const auto& name : object_names) {
        ObjectAnnotation obj;
        obj.name = normalize_object_name(name);
        obj.raw_name = name;
        img.objects.push_back(obj);
    }
    return img;
}

inline Corpus make_corpus(std::vector<AnnotatedImage> images) {
    Corpus corpus;
    corpus.images = std::move(images);
    corpus.source_label = "test";
    corpus.created_at = "2000-01-01T00:00:00Z";
    return corpus;
}

inline InstructionRecord make_record(const std::string& id, const std::string& image_id,
                                     TaskType task = TaskType::cross_modal,
                                     VerificationStatus status = VerificationStatus::passed,
                                     int round = 0) {
    InstructionRecord r;
    r.record_id = id;
    r.image_id = image_id;
    r.task_type = task;
    r.instruction = "What does the scene show near " + id + "?";
    r.response = "It shows the annotated arrangement for " + id + ".";
    r.complication_round = round;
    r.verification_status = status;
    r.template_fingerprint = "feedfeedfeedfeed";
    r.model = "gpt-4";
    return r;
}

inline std::shared_ptr<MockProvider> sequential_mock(std::vector<std::string> contents) {
    std::vector<ScriptEntry> entries;
    for (auto& c : contents) entries.push_back(ScriptEntry{std::nullopt, std::move(c), {}, {}});
    return std::make_shared<MockProvider>(std::move(entries), MockProvider::Mode::sequential);
}

/// Answers any request deterministically from its content, emulating a
/// cooperative model. Verification verdicts fail exactly for the request
/// fingerprints in fail_verdicts.
class RuleResponder : public ChatProvider {
public:
    std::set<std::string> fail_verdicts;

    ChatResponse complete(const ChatRequest& request) override {
        request.validate();
        const std::string& prompt = request.messages.back().content;
        const std::string h = request.fingerprint().substr(0, 8);
        std::string content;
        if (prompt.find("cross-modal reasoning instructions") != std::string::npos) {
            content = qa_pairs(count_requested(prompt), 0, h);
        } else if (prompt.find("one or more hops") != std::string::npos) {
            content = qa_pairs(1, 0, h);
        } else if (prompt.find("Prompt Rewriter") != std::string::npos) {
            content = qa_pairs(1, source_round(prompt) + 1, h);
        } else if (prompt.find("Prompt Judge") != std::string::npos) {
            bool fail = fail_verdicts.count(request.fingerprint()) > 0;
            content = std::string("The candidate was checked against the annotations.\nVerdict: ") +
                      (fail ? "no" : "yes");
        } else if (prompt.find("bool QA instruction") != std::string::npos) {
            bool yes = (h[0] % 2) == 0;
            content = "Question 1: Does the scene match the detail referenced in probe " + h +
                      "?\nAnswer 1: " + (yes ? "yes" : "no");
        } else if (prompt.find("multi-choice QA instruction") != std::string::npos) {
            char letter = static_cast<char>('A' + (fnv1a64(h) % 4));
            content = "Question 1: Which option matches the detail referenced in probe " + h + "?\n";
            for (char c = 'A'; c <= 'D'; ++c)
                content += std::string("Option ") + c + ": candidate " + h + "-" + c + "\n";
            content += std::string("Answer 1: ") + letter;
        } else {
            throw PermanentError("rule responder does not understand this prompt");
        }
        ChatResponse resp;
        resp.content = content;
        size_t prompt_len = 0;
        for (const auto& m : request.messages) prompt_len += m.content.size();
        resp.prompt_tokens = prompt_len / 4 + 1;
        resp.completion_tokens = content.size() / 4 + 1;
        resp.provider = name();
        return resp;
    }

    std::string name() const override { return "rule-responder"; }

private:
    static size_t count_requested(const std::string& prompt) {
        size_t pos = prompt.find("design ");
        if (pos == std::string::npos) return 1;
        size_t n = 0;
        for (size_t i = pos + 7; i < prompt.size() && std::isdigit(static_cast<unsigned char>(prompt[i])); ++i)
            n = n * 10 + static_cast<size_t>(prompt[i] - '0');
        return n == 0 ? 1 : n;
    }

    // synthesized instructions carry an [rK/...] marker; the rewrite of a
    // round-K instruction announces round K+1
    static int source_round(const std::string& prompt) {
        int best = 0;
        for (size_t pos = prompt.find("[r"); pos != std::string::npos;
             pos = prompt.find("[r", pos + 1)) {
            size_t i = pos + 2;
            int value = 0;
            bool any = false;
            while (i < prompt.size() && std::isdigit(static_cast<unsigned char>(prompt[i]))) {
                value = value * 10 + (prompt[i] - '0');
                any = true;
                ++i;
            }
            if (any && i < prompt.size() && prompt[i] == '/') best = std::max(best, value);
        }
        return best;
    }

    static std::string qa_pairs(size_t count, int round, const std::string& h) {
        std::string out;
        for (size_t k = 1; k <= count; ++k) {
            std::string tag = "[r" + std::to_string(round) + "/" + h + "-" + std::to_string(k) + "]";
            out += "Question " + std::to_string(k) + ": " + tag +
                   " Which annotated entity anchors the interaction described across the "
                   "captions, and what distinguishes it from the other entities?\n";
            out += "Answer " + std::to_string(k) + ": " + tag +
                   " The captions single out one entity by its position and role; the others "
                   "only support the described interaction.\n";
        }
        return out;
    }
};

/// Wraps a provider and records every exchange as a fingerprint-keyed
/// script entry.
class RecordingProvider : public ChatProvider {
public:
    explicit RecordingProvider(std::shared_ptr<ChatProvider> inner) : inner_(std::move(inner)) {}

    ChatResponse complete(const ChatRequest& request) override {
        ChatResponse resp = inner_->complete(request);
        std::lock_guard<std::mutex> lock(mutex_);
        ScriptEntry e;
        e.fingerprint = request.fingerprint();
        e.content = resp.content;
        e.prompt_tokens = resp.prompt_tokens;
        e.completion_tokens = resp.completion_tokens;
        script_[*e.fingerprint] = e;
        return resp;
    }

    std::string name() const override { return inner_->name(); }

    void write_script(const std::filesystem::path& path) const {
        std::lock_guard<std::mutex> lock(mutex_);
        std::string out;
        for (const auto& [fp, e] : script_) {
            nlohmann::json j{{"fingerprint", fp},
                             {"content", e.content},
                             {"prompt_tokens", *e.prompt_tokens},
                             {"completion_tokens", *e.completion_tokens}};
            out += j.dump();
            out += '\n';
        }
        write_file_atomic(path, out);
    }

private:
    std::shared_ptr<ChatProvider> inner_;
    mutable std::mutex mutex_;
    std::map<std::string, ScriptEntry> script_;
};

/// Thrown by KillSwitchProvider to emulate a crash mid-run.
struct AbortSignal {
    size_t after_calls = 0;
};

class KillSwitchProvider : public ChatProvider {
public:
    KillSwitchProvider(std::shared_ptr<ChatProvider> inner, size_t budget)
        : inner_(std::move(inner)), budget_(budget) {}

    ChatResponse complete(const ChatRequest& request) override {
        if (used_.fetch_add(1) >= budget_) throw AbortSignal{budget_};
        return inner_->complete(request);
    }

    std::string name() const override { return inner_->name(); }
    size_t calls() const { return used_.load(); }

private:
    std::shared_ptr<ChatProvider> inner_;
    size_t budget_;
    std::atomic<size_t> used_{0};
};

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        auto base = std::filesystem::temp_directory_path();
        path_ = base / ("comvint-test-" + tag + "-" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    static std::atomic<size_t>& counter() {
        static std::atomic<size_t> c{0};
        return c;
    }
    std::filesystem::path path_;
};

}  // namespace test_support
