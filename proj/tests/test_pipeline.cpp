#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "comvint/pipeline.hpp"
#include "support/test_support.hpp"

using namespace comvint;
using test_support::AbortSignal;
using test_support::KillSwitchProvider;
using test_support::make_corpus;
using test_support::make_image;
using test_support::make_record;
using test_support::RuleResponder;
using test_support::sequential_mock;
using test_support::TempDir;

namespace {

PipelineConfig test_config() {
    PipelineConfig config;
    config.seed = 11;
    config.retry.base_delay = std::chrono::milliseconds(1);
    return config;
}

PipelineOps make_ops(const PipelineConfig& config, ChatProvider& provider) {
    return PipelineOps(config, TemplateSet::defaults(), provider);
}

Corpus two_image_corpus() {
    return make_corpus({make_image("i1", {"A man rides a horse"}, {"a man", "a horse"}),
                        make_image("i2", {"A dog chases a ball"}, {"a dog", "a ball"})});
}

std::string pairs_text(size_t n, const std::string& tag) {
    std::string out;
    for (size_t k = 1; k <= n; ++k)
        out += "Question " + std::to_string(k) + ": " + tag + " q" + std::to_string(k) +
               "\nAnswer " + std::to_string(k) + ": " + tag + " a" + std::to_string(k) + "\n";
    return out;
}

ImageLookup lookup_for(const Corpus& corpus) { return lookup_from_corpus(corpus); }

// Golden-shaped fixture used by the runner tests: richness filter keeps
// half the images, object filter keeps the small ones.
Corpus runner_corpus() {
    std::vector<AnnotatedImage> images;
    for (int i = 0; i < 4; ++i) {
        bool rich = i < 2;
        std::string cap(rich ? 80 : 10, 'x');
        std::vector<std::string> names = {"entity" + std::to_string(i), "shared"};
        if (i >= 3)
            for (int k = 0; k < 4; ++k) names.push_back("extra" + std::to_string(k));
        images.push_back(make_image("img" + std::to_string(i),
                                    {cap, "A scene with entity " + std::to_string(i)}, names));
    }
    return make_corpus(images);
}

PipelineConfig runner_config(const std::filesystem::path& corpus_path) {
    PipelineConfig config;
    config.seed = 5;
    config.caption_char_min = 50;
    config.object_count_max = 3;
    config.complication_rounds = 1;
    config.cross_modal_per_image = 2;
    config.retry.base_delay = std::chrono::milliseconds(1);
    config.cross_modal_corpus = CorpusInput{corpus_path.string(), "canonical"};
    config.outside_knowledge_corpus = CorpusInput{corpus_path.string(), "canonical"};
    return config;
}

}  // namespace

TEST_CASE("cross-modal synthesis: three records per image at round zero", "[pipeline]") {
    auto config = test_config();
    auto mock = sequential_mock({pairs_text(3, "[r0/x1]"), pairs_text(3, "[r0/x2]")});
    auto ops = make_ops(config, *mock);
    auto records = synthesize_cross_modal(two_image_corpus(), ops, config);
    REQUIRE(records.size() == 6);
    for (const auto& r : records) {
        CHECK(r.complication_round == 0);
        CHECK(r.format == RecordFormat::open_ended);
        CHECK(r.verification_status == VerificationStatus::unverified);
        CHECK(r.task_type == TaskType::cross_modal);
        CHECK_FALSE(r.parent_id.has_value());
    }
    CHECK(records[0].record_id == "cm-i1-1");
    CHECK(records[3].record_id == "cm-i2-1");
}

TEST_CASE("cross-modal synthesis: persistent parse mismatch skips the image", "[pipeline]") {
    auto config = test_config();
    // image 1 parses; image 2 returns one pair (expecting 3) twice: re-ask then skip
    auto mock = sequential_mock({pairs_text(3, "[r0/ok]"), pairs_text(1, "[r0/bad]"),
                                 pairs_text(1, "[r0/bad]")});
    auto ops = make_ops(config, *mock);
    std::vector<RunLogEntry> logs;
    auto records = synthesize_cross_modal(two_image_corpus(), ops, config, nullptr, &logs);
    CHECK(records.size() == 3);
    size_t mismatches = 0;
    for (const auto& l : logs) mismatches += l.outcome.rfind("parse_mismatch", 0) == 0 ? 1 : 0;
    CHECK(mismatches == 2);
}

TEST_CASE("cross-modal synthesis: empty corpus yields nothing", "[pipeline]") {
    auto config = test_config();
    auto mock = sequential_mock({});
    auto ops = make_ops(config, *mock);
    CHECK(synthesize_cross_modal(Corpus{}, ops, config).empty());
}

TEST_CASE("outside-knowledge synthesis produces one record per image", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = make_corpus({make_image("i1", {"c"}, {"violin", "chair"}),
                                 make_image("i2", {"c"}, {"violin"}),
                                 make_image("i3", {"c"}, {"kite", "violin"})});
    CorpusStats stats = compute_corpus_stats(corpus);
    auto mock = sequential_mock({pairs_text(1, "[r0/a]"), pairs_text(1, "[r0/b]"),
                                 pairs_text(1, "[r0/c]")});
    auto ops = make_ops(config, *mock);
    auto records = synthesize_outside_knowledge(corpus, stats, ops, config);
    REQUIRE(records.size() == 3);
    for (const auto& r : records) CHECK(r.task_type == TaskType::outside_knowledge);
    CHECK(records[0].record_id == "ok-i1-1");
}

TEST_CASE("outside-knowledge synthesis skips images with no objects", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = make_corpus({make_image("i1", {"c"}, {}), make_image("i2", {"c"}, {"kite"})});
    CorpusStats stats = compute_corpus_stats(corpus);
    auto mock = sequential_mock({pairs_text(1, "[r0/z]")});
    auto ops = make_ops(config, *mock);
    std::vector<RunLogEntry> logs;
    auto records = synthesize_outside_knowledge(corpus, stats, ops, config, nullptr, &logs);
    REQUIRE(records.size() == 1);
    CHECK(records[0].image_id == "i2");
    bool saw_skip = false;
    for (const auto& l : logs) saw_skip |= l.outcome == "skipped_no_objects";
    CHECK(saw_skip);
}

TEST_CASE("outside-knowledge synthesis is deterministic per seed", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = make_corpus({make_image("i1", {"c"}, {"violin", "chair", "kite"})});
    CorpusStats stats = compute_corpus_stats(corpus);
    auto responder = std::make_shared<RuleResponder>();
    auto ops = make_ops(config, *responder);
    auto first = synthesize_outside_knowledge(corpus, stats, ops, config);
    auto second = synthesize_outside_knowledge(corpus, stats, ops, config);
    CHECK(first == second);
}

TEST_CASE("verify assigns statuses and keep_passed filters", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> records = {
        make_record("cm-i1-1", "i1", TaskType::cross_modal, VerificationStatus::unverified),
        make_record("cm-i1-2", "i1", TaskType::cross_modal, VerificationStatus::unverified),
        make_record("cm-i2-1", "i2", TaskType::cross_modal, VerificationStatus::unverified)};
    auto mock = sequential_mock({"Verdict: yes", "Verdict: no", "ok.\nVerdict: yes"});
    auto ops = make_ops(config, *mock);
    auto judged = verify(records, lookup_for(corpus), ops, config);
    REQUIRE(judged.size() == 3);
    CHECK(judged[0].verification_status == VerificationStatus::passed);
    CHECK(judged[1].verification_status == VerificationStatus::failed);
    CHECK(judged[2].verification_status == VerificationStatus::passed);
    CHECK(keep_passed(judged).size() == 2);
}

TEST_CASE("verify treats a missing verdict line as failure", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> records = {
        make_record("cm-i1-1", "i1", TaskType::cross_modal, VerificationStatus::unverified)};
    auto mock = sequential_mock({"great instruction!"});
    auto ops = make_ops(config, *mock);
    auto judged = verify(records, lookup_for(corpus), ops, config);
    CHECK(judged[0].verification_status == VerificationStatus::failed);
}

TEST_CASE("verify of an empty input is empty", "[pipeline]") {
    auto config = test_config();
    auto mock = sequential_mock({});
    auto ops = make_ops(config, *mock);
    CHECK(verify({}, lookup_for(two_image_corpus()), ops, config).empty());
}

TEST_CASE("complicate lifts passed records one round", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> records = {make_record("cm-i1-1", "i1"),
                                              make_record("cm-i2-1", "i2")};
    auto mock = sequential_mock({pairs_text(1, "[r1/a]"), pairs_text(1, "[r1/b]")});
    auto ops = make_ops(config, *mock);
    auto children = complicate(records, lookup_for(corpus), ops, config, 1);
    REQUIRE(children.size() == 2);
    CHECK(children[0].record_id == "cm-i1-1-c1");
    CHECK(children[0].parent_id == "cm-i1-1");
    CHECK(children[0].complication_round == 1);
    CHECK(children[0].verification_status == VerificationStatus::unverified);
    CHECK(children[1].parent_id == "cm-i2-1");
}

TEST_CASE("complicate: a permanent provider error skips only that lineage", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> records = {make_record("cm-i1-1", "i1"),
                                              make_record("cm-i2-1", "i2")};
    class FirstFails : public ChatProvider {
    public:
        ChatResponse complete(const ChatRequest& req) override {
            if (++calls_ == 1) throw PermanentError("HTTP 400");
            ChatResponse resp;
            resp.content = pairs_text(1, "[r1/b]");
            resp.prompt_tokens = resp.completion_tokens = 1;
            return resp;
        }
        std::string name() const override { return "first-fails"; }

    private:
        int calls_ = 0;
    };
    FirstFails provider;
    auto ops = make_ops(config, provider);
    auto children = complicate(records, lookup_for(corpus), ops, config, 1);
    REQUIRE(children.size() == 1);
    CHECK(children[0].record_id == "cm-i2-1-c1");
}

TEST_CASE("complicate rejects failed input records", "[pipeline]") {
    auto config = test_config();
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> records = {
        make_record("cm-i1-1", "i1", TaskType::cross_modal, VerificationStatus::failed)};
    auto mock = sequential_mock({});
    auto ops = make_ops(config, *mock);
    CHECK_THROWS_AS(complicate(records, lookup_for(corpus), ops, config, 1),
                    PreconditionViolation);
}

TEST_CASE("complicate_then_verify: full lineage when every verdict passes", "[pipeline]") {
    auto config = test_config();
    config.complication_rounds = 2;
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> round0 = {make_record("cm-i1-1", "i1")};
    auto mock = sequential_mock({pairs_text(1, "[r1/a]"), "Verdict: yes", pairs_text(1, "[r2/a]"),
                                 "Verdict: yes"});
    auto ops = make_ops(config, *mock);
    auto out = complicate_then_verify(round0, lookup_for(corpus), ops, config);
    REQUIRE(out.size() == 3);
    std::set<int> rounds;
    for (const auto& r : out) rounds.insert(r.complication_round);
    CHECK(rounds == std::set<int>{0, 1, 2});
}

TEST_CASE("complicate_then_verify: failed round-1 keeps the round-0 ancestor", "[pipeline]") {
    auto config = test_config();
    config.complication_rounds = 2;
    Corpus corpus = two_image_corpus();
    std::vector<InstructionRecord> round0 = {make_record("cm-i1-1", "i1")};
    // round-1 verdict fails: no round-2 attempt for the lineage
    auto mock = sequential_mock({pairs_text(1, "[r1/a]"), "Verdict: no"});
    auto ops = make_ops(config, *mock);
    auto out = complicate_then_verify(round0, lookup_for(corpus), ops, config);
    REQUIRE(out.size() == 1);
    CHECK(out[0].record_id == "cm-i1-1");
    CHECK_THROWS_AS(mock->complete(ChatRequest{"m", {{"user", "x"}}, 1.0, 4}), ScriptExhausted);
}

TEST_CASE("complicate_then_verify with zero rounds is the identity on passed records",
          "[pipeline]") {
    auto config = test_config();
    config.complication_rounds = 0;
    auto mock = sequential_mock({});
    auto ops = make_ops(config, *mock);
    std::vector<InstructionRecord> round0 = {make_record("cm-i1-1", "i1")};
    auto out = complicate_then_verify(round0, lookup_for(two_image_corpus()), ops, config);
    CHECK(out == round0);
}

TEST_CASE("lineage integrity under the rule responder", "[pipeline]") {
    auto config = test_config();
    config.complication_rounds = 2;
    Corpus corpus = two_image_corpus();
    auto responder = std::make_shared<RuleResponder>();
    auto ops = make_ops(config, *responder);
    auto round0 = synthesize_cross_modal(corpus, ops, config);
    auto judged = verify(round0, lookup_for(corpus), ops, config);
    auto out = complicate_then_verify(judged, lookup_for(corpus), ops, config);
    std::map<std::string, InstructionRecord> by_id;
    for (const auto& r : out) by_id[r.record_id] = r;
    for (const auto& r : out) {
        if (r.complication_round == 0) continue;
        REQUIRE(r.parent_id.has_value());
        REQUIRE(by_id.count(*r.parent_id));
        const auto& parent = by_id[*r.parent_id];
        CHECK(parent.complication_round == r.complication_round - 1);
        CHECK(parent.image_id == r.image_id);
        CHECK(parent.task_type == r.task_type);
    }
}

TEST_CASE("reformulate: fractions carve disjoint bool and multi-choice sets", "[pipeline]") {
    auto config = test_config();
    std::vector<InstructionRecord> records;
    for (int i = 0; i < 8; ++i) records.push_back(make_record("cm-i-" + std::to_string(i), "i"));
    auto responder = std::make_shared<RuleResponder>();
    auto ops = make_ops(config, *responder);
    auto out = reformulate(records, ops, config, config.seed);
    REQUIRE(out.size() == 8);
    size_t bools = 0, mcs = 0, open = 0;
    for (const auto& r : out) {
        if (r.format == RecordFormat::bool_qa) ++bools;
        if (r.format == RecordFormat::multi_choice) ++mcs;
        if (r.format == RecordFormat::open_ended) ++open;
        if (r.format != RecordFormat::open_ended) {
            REQUIRE(r.parent_id.has_value());
            CHECK(r.verification_status == VerificationStatus::passed);
        }
    }
    CHECK(bools == 2);
    CHECK(mcs == 2);
    CHECK(open == 4);
}

TEST_CASE("reformulate: a bad conversion keeps the open-ended source", "[pipeline]") {
    auto config = test_config();
    config.reformulation.bool_fraction = 0.0;
    config.reformulation.multi_choice_fraction = 1.0;
    std::vector<InstructionRecord> records = {make_record("cm-i-1", "i")};
    // three options only: the conversion fails and the source survives
    auto mock = sequential_mock(
        {"Question 1: Q\nOption A: a\nOption B: b\nOption C: c\nAnswer 1: A"});
    auto ops = make_ops(config, *mock);
    std::vector<RunLogEntry> logs;
    auto out = reformulate(records, ops, config, 1, nullptr, &logs);
    REQUIRE(out.size() == 1);
    CHECK(out[0].format == RecordFormat::open_ended);
    CHECK(out[0].record_id == "cm-i-1");
    bool logged = false;
    for (const auto& l : logs) logged |= l.outcome.rfind("conversion_failed", 0) == 0;
    CHECK(logged);
}

TEST_CASE("reformulate with zero fractions is the identity", "[pipeline]") {
    auto config = test_config();
    config.reformulation.bool_fraction = 0.0;
    config.reformulation.multi_choice_fraction = 0.0;
    std::vector<InstructionRecord> records = {make_record("cm-i-1", "i"),
                                              make_record("cm-i-2", "i")};
    auto mock = sequential_mock({});
    auto ops = make_ops(config, *mock);
    CHECK(reformulate(records, ops, config, 1) == records);
}

TEST_CASE("dedup collapses equivalent instructions per image", "[pipeline]") {
    auto a = make_record("cm-i-1", "i");
    a.instruction = "What is X?";
    auto b = make_record("cm-i-2", "i");
    b.instruction = "what is x ?";
    auto c = make_record("cm-j-1", "j");
    c.instruction = "What is X?";
    auto out = dedup({a, b, c});
    REQUIRE(out.size() == 2);
    CHECK(out[0].record_id == "cm-i-1");  // first occurrence wins
    CHECK(out[1].record_id == "cm-j-1");  // same text, different image
    CHECK(dedup({}).empty());
}

// ---------------------------------------------------------------------------
// Checkpointed runner.

TEST_CASE("runner: fresh run writes dataset, manifest, ledger and runlog", "[pipeline]") {
    TempDir dir("runner");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);
    RuleResponder responder;
    PipelineRunner runner(config, dir.path() / "runs", "t1", responder, false, "test");
    auto dataset_path = runner.run();
    REQUIRE(std::filesystem::exists(dataset_path));

    auto records = read_records(dataset_path);
    CHECK(!records.empty());
    for (const auto& r : records) CHECK(r.verification_status == VerificationStatus::passed);

    const auto& paths = runner.paths();
    CHECK(std::filesystem::exists(paths.manifest));
    CHECK(std::filesystem::exists(paths.runlog));
    CHECK(std::filesystem::exists(paths.ledger));
    CHECK(std::filesystem::exists(paths.conversations));
    CHECK(std::filesystem::exists(paths.stats));

    // the cost ledger equals a replay of the run log
    CostLedger replayed;
    for (const auto& line : split_lines(read_file(paths.runlog))) {
        if (trim(line).empty()) continue;
        RunLogEntry e = runlog_entry_from_json(json::parse(line));
        if (e.outcome.rfind("ok", 0) != 0) continue;
        ChatResponse resp;
        resp.prompt_tokens = e.prompt_tokens;
        resp.completion_tokens = e.completion_tokens;
        replayed.record(e.model, resp, config.price_table);
    }
    CHECK(read_file(paths.ledger) == replayed.to_record_stream());

    // the run log opens with the two selection reports
    auto first_line = split_lines(read_file(paths.runlog)).at(0);
    json select_entry = json::parse(first_line);
    CHECK(select_entry["stage"] == "select");
    CHECK(select_entry["retained_count"].get<size_t>() +
              select_entry["rejected_count"].get<size_t>() ==
          select_entry["input_count"].get<size_t>());
}

TEST_CASE("runner: rerunning a complete run returns the same dataset", "[pipeline]") {
    TempDir dir("rerun");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);
    RuleResponder responder;
    PipelineRunner first(config, dir.path() / "runs", "t1", responder, false, "test");
    auto dataset_path = first.run();
    std::string bytes = read_file(dataset_path);

    PipelineRunner resumed(config, dir.path() / "runs", "t1", responder, true, "test");
    CHECK(resumed.run() == dataset_path);
    CHECK(read_file(dataset_path) == bytes);
}

TEST_CASE("runner: kill mid-run, resume, identical dataset", "[pipeline]") {
    TempDir dir("kill");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);

    // baseline
    RuleResponder baseline_responder;
    PipelineRunner baseline(config, dir.path() / "baseline", "t1", baseline_responder, false, "test");
    std::string expected = read_file(baseline.run());

    auto inner = std::make_shared<RuleResponder>();
    auto killer = std::make_shared<KillSwitchProvider>(inner, 6);
    PipelineRunner doomed(config, dir.path() / "runs", "t1", *killer, false, "test");
    bool aborted = false;
    try {
        doomed.run();
    } catch (const AbortSignal&) {
        aborted = true;
    }
    REQUIRE(aborted);

    RuleResponder resume_responder;
    PipelineRunner resumed(config, dir.path() / "runs", "t1", resume_responder, true, "test");
    auto dataset_path = resumed.run();
    CHECK(read_file(dataset_path) == expected);
}

TEST_CASE("runner: a torn record-stream tail is truncated on resume", "[pipeline]") {
    TempDir dir("torn");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);

    RuleResponder baseline_responder;
    PipelineRunner baseline(config, dir.path() / "baseline", "t1", baseline_responder, false, "test");
    std::string expected = read_file(baseline.run());

    auto inner = std::make_shared<RuleResponder>();
    auto killer = std::make_shared<KillSwitchProvider>(inner, 9);
    PipelineRunner doomed(config, dir.path() / "runs", "t1", *killer, false, "test");
    try {
        doomed.run();
    } catch (const AbortSignal&) {
    }
    {
        // emulate a crash after append but before the checkpoint update
        std::ofstream out(dir.path() / "runs" / "t1" / "records",
                          std::ios::binary | std::ios::app);
        out << R"({"torn": )";
    }
    RuleResponder resume_responder;
    PipelineRunner resumed(config, dir.path() / "runs", "t1", resume_responder, true, "test");
    CHECK(read_file(resumed.run()) == expected);
}

TEST_CASE("runner: truncated checkpoint file is reported", "[pipeline]") {
    TempDir dir("badcp");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);
    auto inner = std::make_shared<RuleResponder>();
    auto killer = std::make_shared<KillSwitchProvider>(inner, 5);
    PipelineRunner doomed(config, dir.path() / "runs", "t1", *killer, false, "test");
    try {
        doomed.run();
    } catch (const AbortSignal&) {
    }
    auto cp_path = dir.path() / "runs" / "t1" / "checkpoint";
    std::string cp = read_file(cp_path);
    write_file_atomic(cp_path, cp.substr(0, cp.size() / 2));

    RuleResponder responder;
    PipelineRunner resumed(config, dir.path() / "runs", "t1", responder, true, "test");
    CHECK_THROWS_AS(resumed.run(), CorruptCheckpoint);
}

TEST_CASE("runner: a doctored record stream is rejected", "[pipeline]") {
    TempDir dir("tamper");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);
    auto inner = std::make_shared<RuleResponder>();
    auto killer = std::make_shared<KillSwitchProvider>(inner, 8);
    PipelineRunner doomed(config, dir.path() / "runs", "t1", *killer, false, "test");
    try {
        doomed.run();
    } catch (const AbortSignal&) {
    }
    auto records_path = dir.path() / "runs" / "t1" / "records";
    std::string stream = read_file(records_path);
    stream[stream.size() / 2] = stream[stream.size() / 2] == 'a' ? 'b' : 'a';
    write_file_atomic(records_path, stream);

    RuleResponder responder;
    PipelineRunner resumed(config, dir.path() / "runs", "t1", responder, true, "test");
    CHECK_THROWS_AS(resumed.run(), CorruptCheckpoint);
}

TEST_CASE("runner: concurrency does not change the output bytes", "[pipeline]") {
    TempDir dir("conc");
    auto corpus_path = dir.path() / "corpus.jsonl";
    write_corpus(runner_corpus(), corpus_path);
    auto config = runner_config(corpus_path);

    RuleResponder serial_responder;
    PipelineRunner serial(config, dir.path() / "serial", "t1", serial_responder, false, "test");
    std::string serial_bytes = read_file(serial.run());

    auto parallel_config = config;
    parallel_config.concurrency_limit = 4;
    RuleResponder parallel_responder;
    PipelineRunner parallel(parallel_config, dir.path() / "parallel", "t1", parallel_responder,
                            false, "test");
    std::string parallel_bytes = read_file(parallel.run());
    CHECK(serial_bytes == parallel_bytes);
}
