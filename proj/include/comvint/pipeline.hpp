#pragma once

// End-to-end orchestration: synthesis of both instruction types, the
// iterative complicate-then-verify loop, reformulation into bool and
// multi-choice formats, dedup, mixing, and the checkpointed resumable
// runner. The record stream is append-only and event-sourced: the latest
// occurrence of a record_id wins, so status updates are re-appends and a
// resumed run replays the stream to rebuild state.

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "comvint/config.hpp"
#include "comvint/dataset.hpp"
#include "comvint/llm_client.hpp"
#include "comvint/prompts.hpp"
#include "comvint/records.hpp"
#include "comvint/selection.hpp"

namespace comvint {

using ImageLookup = std::function<const AnnotatedImage&(const InstructionRecord&)>;

inline ImageLookup lookup_from_corpus(const Corpus& corpus) {
    auto index = std::make_shared<std::map<std::string, AnnotatedImage>>();
    for (const auto& img : corpus.images) index->emplace(img.image_id, img);
    return [index](const InstructionRecord& r) -> const AnnotatedImage& {
        auto it = index->find(r.image_id);
        if (it == index->end())
            throw PreconditionViolation("no annotations for image '" + r.image_id + "'");
        return it->second;
    };
}

inline std::vector<InstructionRecord> keep_passed(const std::vector<InstructionRecord>& records) {
    std::vector<InstructionRecord> out;
    for (const auto& r : records)
        if (r.verification_status == VerificationStatus::passed) out.push_back(r);
    return out;
}

/// Drops records whose (image_id, normalized instruction) duplicates an
/// earlier record; first occurrence wins.
inline std::vector<InstructionRecord> dedup(const std::vector<InstructionRecord>& records) {
    std::set<std::pair<std::string, std::string>> seen;
    std::vector<InstructionRecord> out;
    for (const auto& r : records)
        if (seen.emplace(r.image_id, normalize_instruction_key(r.instruction)).second)
            out.push_back(r);
    return out;
}

// ---------------------------------------------------------------------------
// Per-item execution. Every provider exchange and its outcome is captured
// in the result so the runner can commit records, run log and cost ledger
// strictly in item order.

struct ItemOutcome {
    std::vector<InstructionRecord> records;
    std::vector<RunLogEntry> logs;
};

class PipelineOps {
public:
    PipelineOps(const PipelineConfig& config, const TemplateSet& templates, ChatProvider& provider)
        : config_(config),
          provider_(provider),
          prompts_(templates, config.cross_modal_per_image) {}

    const PromptBuilder& prompts() const { return prompts_; }

    ItemOutcome synth_cross_modal_item(const AnnotatedImage& image) const {
        ItemOutcome out;
        if (image.captions.empty() || image.objects.empty()) {
            out.logs.push_back(make_log("synth_cm", image.image_id, "", "", 0, 0, "",
                                        "skipped_empty_annotations"));
            return out;
        }
        const std::string prompt = prompts_.cross_modal(image);
        auto exchange = ask_with_reask(
            "synthesis", "synth_cm", image.image_id, prompt,
            static_cast<size_t>(config_.cross_modal_per_image), out.logs);
        if (!exchange) return out;
        const auto& pairs = exchange->second;
        for (size_t k = 0; k < pairs.size(); ++k) {
            InstructionRecord r;
            r.record_id = "cm-" + image.image_id + "-" + std::to_string(k + 1);
            r.image_id = image.image_id;
            r.task_type = TaskType::cross_modal;
            r.instruction = pairs[k].first;
            r.response = pairs[k].second;
            r.template_fingerprint = prompts_.tmpl(PromptFamily::cross_modal_synthesis).fingerprint();
            r.model = model_for("synthesis");
            out.records.push_back(std::move(r));
        }
        return out;
    }

    ItemOutcome synth_outside_knowledge_item(const AnnotatedImage& image,
                                             const CorpusStats& stats) const {
        ItemOutcome out;
        if (image.objects.empty()) {
            out.logs.push_back(make_log("synth_ok", image.image_id, "", "", 0, 0, "",
                                        "skipped_no_objects"));
            return out;
        }
        const ObjectAnnotation& topic = select_topic_entity(image, stats);
        KnowledgeCategorySet set{config_.knowledge_categories, config_.category_sample_count};
        auto categories = sample_knowledge_categories(
            set, config_.seed ^ fnv1a64("categories/" + image.image_id));
        const std::string prompt = prompts_.outside_knowledge(image, topic, categories);
        auto exchange =
            ask_with_reask("synthesis", "synth_ok", image.image_id, prompt,
                           static_cast<size_t>(config_.outside_knowledge_per_image), out.logs);
        if (!exchange) return out;
        const auto& pairs = exchange->second;
        for (size_t k = 0; k < pairs.size(); ++k) {
            InstructionRecord r;
            r.record_id = "ok-" + image.image_id + "-" + std::to_string(k + 1);
            r.image_id = image.image_id;
            r.task_type = TaskType::outside_knowledge;
            r.instruction = pairs[k].first;
            r.response = pairs[k].second;
            r.template_fingerprint =
                prompts_.tmpl(PromptFamily::outside_knowledge_synthesis).fingerprint();
            r.model = model_for("synthesis");
            out.records.push_back(std::move(r));
        }
        return out;
    }

    ItemOutcome verify_item(const InstructionRecord& record, const AnnotatedImage& image,
                            const std::string& stage) const {
        ItemOutcome out;
        const std::string prompt = prompts_.verification(record, image);
        ChatRequest req = make_request("verification", prompt);
        InstructionRecord updated = record;
        try {
            ChatResponse resp = provider_.complete(req);
            std::string outcome = "ok";
            try {
                updated.verification_status = parse_verdict(resp.content) == Verdict::pass
                                                  ? VerificationStatus::passed
                                                  : VerificationStatus::failed;
            } catch (const UnparseableVerdict&) {
                // ambiguity must not admit records
                updated.verification_status = VerificationStatus::failed;
                outcome = "unparseable_verdict";
            }
            out.records.push_back(updated);
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(),
                                        fingerprint_hex(resp.content), resp.prompt_tokens,
                                        resp.completion_tokens, req.model, outcome));
        } catch (const TransientError& e) {
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(), "", 0, 0,
                                        req.model, std::string("transient_error: ") + e.what()));
        } catch (const PermanentError& e) {
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(), "", 0, 0,
                                        req.model, std::string("permanent_error: ") + e.what()));
        }
        return out;
    }

    ItemOutcome complicate_item(const InstructionRecord& record, const AnnotatedImage& image,
                                int round_k) const {
        ItemOutcome out;
        if (record.verification_status != VerificationStatus::passed ||
            record.complication_round != round_k - 1)
            throw PreconditionViolation("complication round " + std::to_string(round_k) +
                                        " requires passed records of round " +
                                        std::to_string(round_k - 1));
        const std::string prompt = prompts_.complication(record, image);
        auto exchange = ask_with_reask("complication", "complicate_r" + std::to_string(round_k),
                                       record.record_id, prompt, 1, out.logs);
        if (!exchange) return out;
        InstructionRecord child;
        child.record_id = record.record_id + "-c" + std::to_string(round_k);
        child.image_id = record.image_id;
        child.task_type = record.task_type;
        child.instruction = exchange->second[0].first;
        child.response = exchange->second[0].second;
        child.complication_round = round_k;
        child.parent_id = record.record_id;
        child.template_fingerprint = prompts_.tmpl(PromptFamily::complication).fingerprint();
        child.model = model_for("complication");
        out.records.push_back(std::move(child));
        return out;
    }

    ItemOutcome reformulate_item(const InstructionRecord& record, RecordFormat target) const {
        ItemOutcome out;
        if (record.format != RecordFormat::open_ended ||
            record.verification_status != VerificationStatus::passed)
            throw PreconditionViolation("reformulation requires passed open_ended records");
        const bool to_bool = target == RecordFormat::bool_qa;
        const std::string prompt =
            to_bool ? prompts_.reformulate_bool(record) : prompts_.reformulate_multichoice(record);
        ChatRequest req = make_request("reformulation", prompt);
        const std::string stage = "reformulate";
        try {
            ChatResponse resp = provider_.complete(req);
            InstructionRecord converted = record;
            converted.parent_id = record.record_id;
            converted.template_fingerprint =
                prompts_
                    .tmpl(to_bool ? PromptFamily::reformulate_bool
                                  : PromptFamily::reformulate_multichoice)
                    .fingerprint();
            converted.model = model_for("reformulation");
            if (to_bool) {
                auto pairs = parse_synthesis_response(resp.content, 1);
                std::string answer = to_lower_ascii(trim(pairs[0].second));
                while (!answer.empty() && std::ispunct(static_cast<unsigned char>(answer.back())))
                    answer.pop_back();
                if (answer != "yes" && answer != "no")
                    throw ParseError("bool conversion answer must be yes or no");
                converted.record_id = record.record_id + "-bool";
                converted.format = RecordFormat::bool_qa;
                converted.instruction = pairs[0].first;
                converted.response = answer;
            } else {
                auto mc = parse_multichoice_response(resp.content);
                converted.record_id = record.record_id + "-mc";
                converted.format = RecordFormat::multi_choice;
                converted.instruction = mc.question;
                converted.options = mc.options;
                converted.correct_option = mc.correct_option;
                converted.response = mc.options[static_cast<size_t>(mc.correct_option)];
            }
            out.records.push_back(converted);
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(),
                                        fingerprint_hex(resp.content), resp.prompt_tokens,
                                        resp.completion_tokens, req.model, "ok"));
        } catch (const ParseError& e) {
            // conversion failed: the open-ended source stays in the dataset
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(), "", 0, 0,
                                        req.model, std::string("conversion_failed: ") + e.what()));
        } catch (const TransientError& e) {
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(), "", 0, 0,
                                        req.model, std::string("transient_error: ") + e.what()));
        } catch (const PermanentError& e) {
            out.logs.push_back(make_log(stage, record.record_id, req.fingerprint(), "", 0, 0,
                                        req.model, std::string("permanent_error: ") + e.what()));
        }
        return out;
    }

    ChatRequest make_request(const std::string& stage, const std::string& prompt) const {
        ChatRequest req;
        req.model = model_for(stage);
        req.temperature = config_.stage_temperatures.at(stage);
        req.max_tokens = config_.max_tokens;
        req.messages = {{"user", prompt}};
        return req;
    }

private:
    std::string model_for(const std::string& stage) const { return config_.stage_models.at(stage); }

    static RunLogEntry make_log(const std::string& stage, const std::string& item,
                                const std::string& fingerprint, const std::string& digest,
                                size_t prompt_tokens, size_t completion_tokens,
                                const std::string& model, const std::string& outcome) {
        RunLogEntry e;
        e.stage = stage;
        e.item = item;
        e.fingerprint = fingerprint;
        e.response_digest = digest;
        e.prompt_tokens = prompt_tokens;
        e.completion_tokens = completion_tokens;
        e.model = model;
        e.outcome = outcome;
        return e;
    }

    /// One call plus one automatic re-ask on ParseMismatch, then give up.
    /// Returns the response and its parsed pairs, or nullopt on a skip.
    std::optional<std::pair<ChatResponse, std::vector<InstructionPair>>> ask_with_reask(
        const std::string& stage_kind, const std::string& stage, const std::string& item,
        const std::string& prompt, size_t expected, std::vector<RunLogEntry>& logs) const {
        ChatRequest req = make_request(stage_kind, prompt);
        for (int attempt = 0; attempt < 2; ++attempt) {
            try {
                ChatResponse resp = provider_.complete(req);
                try {
                    auto pairs = parse_synthesis_response(resp.content, expected);
                    logs.push_back(make_log(stage, item, req.fingerprint(),
                                            fingerprint_hex(resp.content), resp.prompt_tokens,
                                            resp.completion_tokens, req.model, "ok"));
                    return std::make_pair(std::move(resp), std::move(pairs));
                } catch (const ParseMismatch& e) {
                    logs.push_back(make_log(stage, item, req.fingerprint(),
                                            fingerprint_hex(resp.content), resp.prompt_tokens,
                                            resp.completion_tokens, req.model,
                                            std::string("parse_mismatch: ") + e.what()));
                    if (attempt == 1) return std::nullopt;  // discarded after the re-ask
                }
            } catch (const TransientError& e) {
                logs.push_back(make_log(stage, item, req.fingerprint(), "", 0, 0, req.model,
                                        std::string("transient_error: ") + e.what()));
                return std::nullopt;
            } catch (const PermanentError& e) {
                logs.push_back(make_log(stage, item, req.fingerprint(), "", 0, 0, req.model,
                                        std::string("permanent_error: ") + e.what()));
                return std::nullopt;
            }
        }
        return std::nullopt;
    }

    const PipelineConfig& config_;
    ChatProvider& provider_;
    PromptBuilder prompts_;
};

// ---------------------------------------------------------------------------
// Batch operations (no checkpointing). These are the building blocks the
// CLI subcommands and tests use; the checkpointed runner replays the same
// per-item logic.

inline void apply_outcome(const ItemOutcome& outcome, std::vector<InstructionRecord>& records,
                          CostLedger* ledger, const PriceTable& prices,
                          std::vector<RunLogEntry>* logs) {
    for (const auto& r : outcome.records) records.push_back(r);
    for (const auto& l : outcome.logs) {
        if (logs) logs->push_back(l);
        if (ledger && l.outcome.rfind("ok", 0) == 0) {
            ChatResponse synthetic;
            synthetic.prompt_tokens = l.prompt_tokens;
            synthetic.completion_tokens = l.completion_tokens;
            ledger->record(l.model, synthetic, prices);
        }
    }
}

inline std::vector<InstructionRecord> synthesize_cross_modal(const Corpus& corpus,
                                                             const PipelineOps& ops,
                                                             const PipelineConfig& config,
                                                             CostLedger* ledger = nullptr,
                                                             std::vector<RunLogEntry>* logs = nullptr) {
    std::vector<InstructionRecord> out;
    for (const auto& image : corpus.images)
        apply_outcome(ops.synth_cross_modal_item(image), out, ledger, config.price_table, logs);
    return out;
}

inline std::vector<InstructionRecord> synthesize_outside_knowledge(
    const Corpus& corpus, const CorpusStats& stats, const PipelineOps& ops,
    const PipelineConfig& config, CostLedger* ledger = nullptr,
    std::vector<RunLogEntry>* logs = nullptr) {
    std::vector<InstructionRecord> out;
    for (const auto& image : corpus.images)
        apply_outcome(ops.synth_outside_knowledge_item(image, stats), out, ledger,
                      config.price_table, logs);
    return out;
}

/// Verifies every record; the output preserves all records with their
/// updated status. Filtering is keep_passed, a separate pure step.
inline std::vector<InstructionRecord> verify(const std::vector<InstructionRecord>& records,
                                             const ImageLookup& lookup, const PipelineOps& ops,
                                             const PipelineConfig& config,
                                             CostLedger* ledger = nullptr,
                                             std::vector<RunLogEntry>* logs = nullptr,
                                             const std::string& stage = "verify") {
    for (const auto& r : records)
        if (r.format != RecordFormat::open_ended)
            throw PreconditionViolation("verification requires open_ended records");
    std::vector<InstructionRecord> out;
    for (const auto& r : records) {
        ItemOutcome item = ops.verify_item(r, lookup(r), stage);
        if (item.records.empty()) {
            // provider failure: the record stays unverified
            out.push_back(r);
            if (logs) logs->insert(logs->end(), item.logs.begin(), item.logs.end());
        } else {
            apply_outcome(item, out, ledger, config.price_table, logs);
        }
    }
    return out;
}

inline std::vector<InstructionRecord> complicate(const std::vector<InstructionRecord>& records,
                                                 const ImageLookup& lookup, const PipelineOps& ops,
                                                 const PipelineConfig& config, int round_k,
                                                 CostLedger* ledger = nullptr,
                                                 std::vector<RunLogEntry>* logs = nullptr) {
    std::vector<InstructionRecord> out;
    for (const auto& r : records)
        apply_outcome(ops.complicate_item(r, lookup(r), round_k), out, ledger, config.price_table,
                      logs);
    return out;
}

/// The iterative loop: for k = 1..rounds, complicate the passed round-(k-1)
/// records and verify the new ones. Returns the union of passed records
/// across all rounds; a lineage whose round-k variant fails keeps its
/// deepest passed ancestor.
inline std::vector<InstructionRecord> complicate_then_verify(
    const std::vector<InstructionRecord>& round0, const ImageLookup& lookup,
    const PipelineOps& ops, const PipelineConfig& config, CostLedger* ledger = nullptr,
    std::vector<RunLogEntry>* logs = nullptr) {
    for (const auto& r : round0) {
        if (r.complication_round != 0)
            throw PreconditionViolation("complicate_then_verify expects round-0 records");
        if (r.verification_status == VerificationStatus::unverified)
            throw PreconditionViolation("complicate_then_verify expects verified records");
    }
    std::vector<InstructionRecord> all_passed = keep_passed(round0);
    std::vector<InstructionRecord> frontier = all_passed;
    for (int k = 1; k <= config.complication_rounds; ++k) {
        if (frontier.empty()) break;
        auto children = complicate(frontier, lookup, ops, config, k, ledger, logs);
        auto judged = verify(children, lookup, ops, config, ledger, logs,
                             "verify_r" + std::to_string(k));
        frontier = keep_passed(judged);
        all_passed.insert(all_passed.end(), frontier.begin(), frontier.end());
    }
    return all_passed;
}

struct ReformulationPlan {
    // parallel vectors: record ids chosen for conversion and their targets
    std::vector<std::string> source_ids;
    std::vector<RecordFormat> targets;
};

/// Deterministic disjoint sampling of conversion targets over the passed
/// open-ended records.
inline ReformulationPlan plan_reformulation(const std::vector<InstructionRecord>& records,
                                            const ReformulationConfig& cfg, uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& r : records) ids.push_back(r.record_id);
    std::sort(ids.begin(), ids.end());
    const size_t n = ids.size();
    size_t n_bool = static_cast<size_t>(round_half_up(static_cast<double>(n) * cfg.bool_fraction));
    size_t n_mc =
        static_cast<size_t>(round_half_up(static_cast<double>(n) * cfg.multi_choice_fraction));
    n_bool = std::min(n_bool, n);
    n_mc = std::min(n_mc, n - n_bool);
    ReformulationPlan plan;
    for (size_t i : sample_indices(n, n_bool + n_mc, seed ^ fnv1a64("reformulate"))) {
        plan.source_ids.push_back(ids[i]);
        plan.targets.push_back(plan.source_ids.size() <= n_bool ? RecordFormat::bool_qa
                                                                : RecordFormat::multi_choice);
    }
    return plan;
}

/// Samples disjoint fractions of the input and converts them; converted
/// records replace their sources unless keep_sources is set. Conversion
/// parse failures leave the source untouched.
inline std::vector<InstructionRecord> reformulate(const std::vector<InstructionRecord>& records,
                                                  const PipelineOps& ops,
                                                  const PipelineConfig& config, uint64_t seed,
                                                  CostLedger* ledger = nullptr,
                                                  std::vector<RunLogEntry>* logs = nullptr) {
    for (const auto& r : records)
        if (r.format != RecordFormat::open_ended ||
            r.verification_status != VerificationStatus::passed)
            throw PreconditionViolation("reformulation requires passed open_ended records");
    ReformulationPlan plan = plan_reformulation(records, config.reformulation, seed);
    std::map<std::string, RecordFormat> chosen;
    for (size_t i = 0; i < plan.source_ids.size(); ++i)
        chosen[plan.source_ids[i]] = plan.targets[i];

    std::vector<InstructionRecord> out;
    for (const auto& r : records) {
        auto it = chosen.find(r.record_id);
        if (it == chosen.end()) {
            out.push_back(r);
            continue;
        }
        ItemOutcome item = ops.reformulate_item(r, it->second);
        if (item.records.empty()) {
            out.push_back(r);  // conversion failed; keep the open-ended source
            if (logs) logs->insert(logs->end(), item.logs.begin(), item.logs.end());
            continue;
        }
        if (config.reformulation.keep_sources) out.push_back(r);
        apply_outcome(item, out, ledger, config.price_table, logs);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ordered parallel execution: workers may overlap, commits happen strictly
// in item order so the record stream and checkpoints are deterministic.

namespace detail {

template <typename Worker, typename Commit>
void ordered_parallel_for(size_t n, int concurrency, Worker worker, Commit commit) {
    if (n == 0) return;
    if (concurrency <= 1) {
        for (size_t i = 0; i < n; ++i) commit(i, worker(i));
        return;
    }
    struct Slot {
        bool ready = false;
        std::exception_ptr error;
        ItemOutcome outcome;
    };
    std::map<size_t, Slot> slots;
    std::mutex mutex;
    std::condition_variable cv;
    std::atomic<size_t> next{0};
    std::atomic<bool> stop{false};

    auto body = [&] {
        for (;;) {
            if (stop.load()) return;
            size_t i = next.fetch_add(1);
            if (i >= n) return;
            Slot slot;
            try {
                slot.outcome = worker(i);
            } catch (...) {
                slot.error = std::current_exception();
            }
            slot.ready = true;
            {
                std::lock_guard<std::mutex> lock(mutex);
                slots[i] = std::move(slot);
            }
            cv.notify_all();
        }
    };
    std::vector<std::thread> threads;
    size_t thread_count = std::min<size_t>(static_cast<size_t>(concurrency), n);
    threads.reserve(thread_count);
    for (size_t t = 0; t < thread_count; ++t) threads.emplace_back(body);

    std::exception_ptr pending;
    for (size_t i = 0; i < n && !pending; ++i) {
        Slot slot;
        {
            std::unique_lock<std::mutex> lock(mutex);
            cv.wait(lock, [&] { return slots.count(i) && slots[i].ready; });
            slot = std::move(slots[i]);
            slots.erase(i);
        }
        if (slot.error) {
            pending = slot.error;
            stop.store(true);
            break;
        }
        try {
            commit(i, std::move(slot.outcome));
        } catch (...) {
            pending = std::current_exception();
            stop.store(true);
        }
    }
    for (auto& t : threads) t.join();
    if (pending) std::rethrow_exception(pending);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpointed runner.

struct RunPaths {
    std::filesystem::path dir;
    std::filesystem::path checkpoint;
    std::filesystem::path records;
    std::filesystem::path runlog;
    std::filesystem::path ledger;
    std::filesystem::path manifest;
    std::filesystem::path dataset;
    std::filesystem::path conversations;
    std::filesystem::path stats;

    static RunPaths at(const std::filesystem::path& out_dir, const std::string& run_id) {
        RunPaths p;
        p.dir = out_dir / run_id;
        p.checkpoint = p.dir / "checkpoint";
        p.records = p.dir / "records";
        p.runlog = p.dir / "runlog";
        p.ledger = p.dir / "ledger";
        p.manifest = p.dir / "manifest.json";
        p.dataset = p.dir / "dataset.jsonl";
        p.conversations = p.dir / "conversations.json";
        p.stats = p.dir / "stats.json";
        return p;
    }
};

struct Checkpoint {
    std::string run_id;
    std::string stage;
    size_t next_item = 0;
    size_t records_bytes = 0;
    std::string records_digest;
    std::string rng_state;
    json ledger_snapshot = json::object();
    bool complete = false;
};

inline json checkpoint_to_json(const Checkpoint& c) {
    return json{{"run_id", c.run_id},       {"stage", c.stage},
                {"next_item", c.next_item}, {"records_bytes", c.records_bytes},
                {"records_digest", c.records_digest}, {"rng_state", c.rng_state},
                {"ledger", c.ledger_snapshot}, {"complete", c.complete}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
    Checkpoint c;
    try {
        c.run_id = j.at("run_id").get<std::string>();
        c.stage = j.at("stage").get<std::string>();
        c.next_item = j.at("next_item").get<size_t>();
        c.records_bytes = j.at("records_bytes").get<size_t>();
        c.records_digest = j.at("records_digest").get<std::string>();
        c.rng_state = j.value("rng_state", "");
        c.ledger_snapshot = j.value("ledger", json::object());
        c.complete = j.value("complete", false);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint is missing fields: ") + e.what());
    }
    return c;
}

class PipelineRunner {
public:
    PipelineRunner(PipelineConfig config, std::filesystem::path out_dir, std::string run_id,
                   ChatProvider& provider, bool resume, std::string tool_version = "0.0.0")
        : config_(std::move(config)),
          templates_(load_templates(config_)),
          ops_(config_, templates_, provider),
          paths_(RunPaths::at(out_dir, run_id)),
          run_id_(std::move(run_id)),
          resume_(resume),
          tool_version_(std::move(tool_version)) {
        validate_config(config_);
        for (const auto& [stage, model] : config_.stage_models)
            if (!config_.price_table.count(model))
                throw ConfigInvalid("models." + stage + " ('" + model +
                                    "') is missing from the price table");
    }

    /// Executes (or resumes) the whole pipeline and returns the dataset path.
    std::filesystem::path run() {
        load_inputs();
        if (resume_)
            restore();
        else
            start_fresh();
        if (complete_) return paths_.dataset;

        const auto stages = stage_names();
        size_t start_stage = stages.size();
        for (size_t s = 0; s < stages.size(); ++s)
            if (stages[s] == stage_) start_stage = s;
        if (start_stage == stages.size())
            throw CorruptCheckpoint("checkpoint stage '" + stage_ +
                                    "' does not exist under this configuration");
        for (size_t s = start_stage; s < stages.size(); ++s) {
            stage_ = stages[s];
            run_stage(stages[s], s == start_stage ? next_item_ : 0);
            next_item_ = 0;
        }
        return paths_.dataset;
    }

    const RunPaths& paths() const { return paths_; }

private:
    std::vector<std::string> stage_names() const {
        std::vector<std::string> names = {"synth_cm", "synth_ok", "verify_r0"};
        for (int k = 1; k <= config_.complication_rounds; ++k) {
            names.push_back("complicate_r" + std::to_string(k));
            names.push_back("verify_r" + std::to_string(k));
        }
        names.push_back("reformulate");
        names.push_back("finalize");
        return names;
    }

    void load_inputs() {
        if (config_.cross_modal_corpus)
            cm_corpus_ = load_corpus_input(*config_.cross_modal_corpus);
        if (config_.outside_knowledge_corpus)
            ok_corpus_ = load_corpus_input(*config_.outside_knowledge_corpus);
        if (!config_.cross_modal_corpus && !config_.outside_knowledge_corpus)
            throw ConfigInvalid("at least one of corpus.cross_modal / corpus.outside_knowledge "
                                "must be configured");
        if (cm_corpus_) {
            auto [filtered, report] = filter_by_caption_richness(*cm_corpus_, config_.caption_char_min);
            cm_filtered_ = std::move(filtered);
            cm_report_ = report;
        }
        if (ok_corpus_) {
            auto [filtered, report] = filter_by_object_count(*ok_corpus_, config_.object_count_max);
            ok_filtered_ = std::move(filtered);
            ok_report_ = report;
            // document frequencies over the post-filter image set
            ok_stats_ = compute_corpus_stats(ok_filtered_);
        }
        cm_lookup_ = lookup_from_corpus(cm_filtered_);
        ok_lookup_ = lookup_from_corpus(ok_filtered_);
    }

    Corpus load_corpus_input(const CorpusInput& input) {
        if (input.format == "canonical") return load_corpus(input.path);
        if (input.format == "flickr30k_entities") return load_flickr30k_entities(input.path).first;
        if (input.format == "visual_genome") return load_visual_genome(input.path).first;
        throw ConfigInvalid("unknown corpus format '" + input.format + "'");
    }

    const AnnotatedImage& image_for(const InstructionRecord& r) const {
        return r.task_type == TaskType::cross_modal ? cm_lookup_(r) : ok_lookup_(r);
    }

    std::string corpus_digest(const CorpusInput& input) const {
        namespace fs = std::filesystem;
        if (fs::is_directory(input.path)) {
            HashStream hash;
            std::vector<fs::path> files;
            for (const auto& entry : fs::directory_iterator(input.path))
                if (entry.is_regular_file()) files.push_back(entry.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                hash.update(f.filename().string());
                hash.update(read_file(f));
            }
            return hash.hex();
        }
        return fingerprint_hex(read_file(input.path));
    }

    json corpus_digests() const {
        json digests = json::object();
        if (config_.cross_modal_corpus)
            digests["cross_modal"] = corpus_digest(*config_.cross_modal_corpus);
        if (config_.outside_knowledge_corpus)
            digests["outside_knowledge"] = corpus_digest(*config_.outside_knowledge_corpus);
        return digests;
    }

    void start_fresh() {
        namespace fs = std::filesystem;
        if (fs::exists(paths_.checkpoint))
            throw ConfigInvalid("run directory already contains a checkpoint; pass resume to "
                                "continue it: " + paths_.dir.string());
        fs::create_directories(paths_.dir);
        std::ofstream(paths_.records, std::ios::binary | std::ios::trunc);
        {
            // selection reports open the run log
            std::ofstream runlog(paths_.runlog, std::ios::binary | std::ios::trunc);
            auto emit = [&](const SelectionReport& report) {
                json j = selection_report_to_json(report);
                j["stage"] = "select";
                runlog << j.dump() << "\n";
            };
            if (cm_corpus_) emit(cm_report_);
            if (ok_corpus_) emit(ok_report_);
        }
        records_bytes_ = 0;
        records_hash_.reset();
        stage_ = "synth_cm";
        next_item_ = 0;
        complete_ = false;

        json manifest;
        manifest["run_id"] = run_id_;
        manifest["config"] = config_to_json(config_);
        manifest["corpus_digests"] = corpus_digests();
        json fps = json::object();
        for (const auto& [name, fp] : ops_.prompts().fingerprints()) fps[name] = fp;
        manifest["template_fingerprints"] = fps;
        manifest["tool_version"] = tool_version_;
        manifest["started_at"] = iso8601_now();
        write_file_atomic(paths_.manifest, manifest.dump(2) + "\n");
        save_checkpoint();
    }

    void restore() {
        namespace fs = std::filesystem;
        if (!fs::exists(paths_.checkpoint))
            throw CorruptCheckpoint("no checkpoint at " + paths_.checkpoint.string());
        json j = json::parse(read_file(paths_.checkpoint), nullptr, false);
        if (j.is_discarded()) throw CorruptCheckpoint("checkpoint file is not valid JSON");
        Checkpoint cp = checkpoint_from_json(j);
        if (cp.run_id != run_id_)
            throw CorruptCheckpoint("checkpoint belongs to run '" + cp.run_id + "'");

        // inputs must be the ones the run started with
        std::string manifest_text;
        try {
            manifest_text = read_file(paths_.manifest);
        } catch (const std::exception& e) {
            throw CorruptCheckpoint(std::string("cannot read run manifest: ") + e.what());
        }
        json manifest = json::parse(manifest_text, nullptr, false);
        if (manifest.is_discarded()) throw CorruptCheckpoint("manifest is not valid JSON");
        if (manifest.value("corpus_digests", json::object()) != corpus_digests())
            throw CorruptCheckpoint("input corpora changed since the run started");

        std::string stream = read_file(paths_.records);
        if (stream.size() < cp.records_bytes)
            throw CorruptCheckpoint("record stream is shorter than the checkpoint prefix");
        std::string prefix = stream.substr(0, cp.records_bytes);
        if (fingerprint_hex(prefix) != cp.records_digest)
            throw CorruptCheckpoint("record stream does not match the checkpoint digest");
        if (stream.size() > cp.records_bytes) {
            // torn tail from a crash mid-item; the items re-execute
            write_file_atomic(paths_.records, prefix);
        }
        records_bytes_ = cp.records_bytes;
        records_hash_.reset();
        records_hash_.update(prefix);

        store_.clear();
        size_t line_no = 0;
        for (const auto& line : split_lines(prefix)) {
            ++line_no;
            if (trim(line).empty()) continue;
            json rec = json::parse(line, nullptr, false);
            if (rec.is_discarded()) throw CorruptCheckpoint("record stream has invalid JSON");
            InstructionRecord r = record_from_json(rec, line_no);
            store_[r.record_id] = r;
        }
        ledger_.load_json(cp.ledger_snapshot);
        stage_ = cp.stage;
        next_item_ = cp.next_item;
        complete_ = cp.complete;
    }

    void save_checkpoint() {
        Checkpoint cp;
        cp.run_id = run_id_;
        cp.stage = stage_;
        cp.next_item = next_item_;
        cp.records_bytes = records_bytes_;
        cp.records_digest = records_hash_.hex();
        cp.rng_state = std::to_string(config_.seed);
        cp.ledger_snapshot = ledger_.to_json();
        cp.complete = complete_;
        write_file_atomic(paths_.checkpoint, checkpoint_to_json(cp).dump() + "\n");
        write_file_atomic(paths_.ledger, ledger_.to_record_stream());
    }

    void commit_outcome(const ItemOutcome& outcome) {
        std::string block;
        for (const auto& r : outcome.records) {
            store_[r.record_id] = r;
            block += record_to_json(r).dump();
            block += '\n';
        }
        if (!block.empty()) {
            std::ofstream out(paths_.records, std::ios::binary | std::ios::app);
            out.write(block.data(), static_cast<std::streamsize>(block.size()));
            out.flush();
            if (!out) throw IoFailure("cannot append to " + paths_.records.string());
            records_bytes_ += block.size();
            records_hash_.update(block);
        }
        if (!outcome.logs.empty()) {
            std::string lines;
            for (const auto& l : outcome.logs) {
                lines += runlog_entry_to_json(l).dump();
                lines += '\n';
                if (l.outcome.rfind("ok", 0) == 0) {
                    ChatResponse synthetic;
                    synthetic.prompt_tokens = l.prompt_tokens;
                    synthetic.completion_tokens = l.completion_tokens;
                    ledger_.record(l.model, synthetic, config_.price_table);
                }
            }
            std::ofstream out(paths_.runlog, std::ios::binary | std::ios::app);
            out.write(lines.data(), static_cast<std::streamsize>(lines.size()));
        }
    }

    std::vector<InstructionRecord> store_records() const {
        std::vector<InstructionRecord> out;
        out.reserve(store_.size());
        for (const auto& [_, r] : store_) out.push_back(r);
        return out;  // std::map iteration = canonical record_id order
    }

    std::vector<InstructionRecord> records_where(
        const std::function<bool(const InstructionRecord&)>& pred) const {
        std::vector<InstructionRecord> out;
        for (const auto& [_, r] : store_)
            if (pred(r)) out.push_back(r);
        return out;
    }

    void run_stage(const std::string& stage, size_t start_item) {
        auto run_items = [&](size_t n, const std::function<ItemOutcome(size_t)>& worker) {
            if (start_item >= n) {
                advance_after(stage, n);
                return;
            }
            size_t remaining = n - start_item;
            detail::ordered_parallel_for(
                remaining, config_.concurrency_limit,
                [&](size_t i) { return worker(start_item + i); },
                [&](size_t i, ItemOutcome outcome) {
                    commit_outcome(outcome);
                    next_item_ = start_item + i + 1;
                    save_checkpoint();
                });
            advance_after(stage, n);
        };

        if (stage == "synth_cm") {
            const auto& images = cm_filtered_.images;
            run_items(images.size(),
                      [&](size_t i) { return ops_.synth_cross_modal_item(images[i]); });
        } else if (stage == "synth_ok") {
            const auto& images = ok_filtered_.images;
            run_items(images.size(), [&](size_t i) {
                return ops_.synth_outside_knowledge_item(images[i], ok_stats_);
            });
        } else if (stage.rfind("verify_r", 0) == 0) {
            int round = std::stoi(stage.substr(8));
            auto items = records_where([&](const InstructionRecord& r) {
                return r.complication_round == round && r.format == RecordFormat::open_ended;
            });
            run_items(items.size(), [&, items](size_t i) {
                return ops_.verify_item(items[i], image_for(items[i]), stage);
            });
        } else if (stage.rfind("complicate_r", 0) == 0) {
            int round = std::stoi(stage.substr(12));
            auto items = records_where([&](const InstructionRecord& r) {
                return r.complication_round == round - 1 &&
                       r.format == RecordFormat::open_ended &&
                       r.verification_status == VerificationStatus::passed;
            });
            run_items(items.size(), [&, items, round](size_t i) {
                return ops_.complicate_item(items[i], image_for(items[i]), round);
            });
        } else if (stage == "reformulate") {
            auto eligible = records_where([](const InstructionRecord& r) {
                return r.format == RecordFormat::open_ended &&
                       r.verification_status == VerificationStatus::passed;
            });
            ReformulationPlan plan = plan_reformulation(eligible, config_.reformulation, config_.seed);
            // snapshot the sources: workers must not touch the live store
            std::vector<InstructionRecord> sources;
            for (const auto& id : plan.source_ids) sources.push_back(store_.at(id));
            run_items(sources.size(), [&, sources, plan](size_t i) {
                return ops_.reformulate_item(sources[i], plan.targets[i]);
            });
        } else if (stage == "finalize") {
            run_items(1, [&](size_t) {
                finalize();
                return ItemOutcome{};
            });
        } else {
            throw CorruptCheckpoint("unknown stage '" + stage + "' in checkpoint");
        }
    }

    void advance_after(const std::string& stage, size_t n) {
        next_item_ = n;
        if (stage == "finalize") complete_ = true;
        save_checkpoint();
    }

    void finalize() {
        auto all = store_records();
        std::vector<InstructionRecord> final_set = keep_passed(all);

        if (!config_.reformulation.keep_sources) {
            std::set<std::string> replaced;
            for (const auto& r : final_set)
                if (r.format != RecordFormat::open_ended && r.parent_id) replaced.insert(*r.parent_id);
            std::vector<InstructionRecord> kept;
            for (auto& r : final_set)
                if (!(r.format == RecordFormat::open_ended && replaced.count(r.record_id)))
                    kept.push_back(std::move(r));
            final_set = std::move(kept);
        }
        sort_canonical(final_set);
        final_set = dedup(final_set);
        if (config_.mix.total > 0)
            final_set = mix(final_set, config_.mix.cross_modal, config_.mix.outside_knowledge,
                            static_cast<size_t>(config_.mix.total), config_.seed);
        write_records(final_set, paths_.dataset);
        export_conversation_format(final_set, paths_.conversations);
        write_file_atomic(paths_.stats, stats_to_json(stats(final_set)).dump(2) + "\n");

        json manifest = json::parse(read_file(paths_.manifest));
        manifest["finished_at"] = iso8601_now();
        manifest["selection_reports"] = json::array();
        if (cm_corpus_) manifest["selection_reports"].push_back(selection_report_to_json(cm_report_));
        if (ok_corpus_) manifest["selection_reports"].push_back(selection_report_to_json(ok_report_));
        write_file_atomic(paths_.manifest, manifest.dump(2) + "\n");
    }

    PipelineConfig config_;
    TemplateSet templates_;
    PipelineOps ops_;
    RunPaths paths_;
    std::string run_id_;
    bool resume_;
    std::string tool_version_;

    std::optional<Corpus> cm_corpus_;
    std::optional<Corpus> ok_corpus_;
    Corpus cm_filtered_;
    Corpus ok_filtered_;
    SelectionReport cm_report_;
    SelectionReport ok_report_;
    CorpusStats ok_stats_;
    ImageLookup cm_lookup_;
    ImageLookup ok_lookup_;

    std::map<std::string, InstructionRecord> store_;
    CostLedger ledger_;
    HashStream records_hash_;
    size_t records_bytes_ = 0;
    std::string stage_ = "synth_cm";
    size_t next_item_ = 0;
    bool complete_ = false;
};

}  // namespace comvint
