// comvint CLI: ingest annotated corpora, select images, run the synthesis /
// complication / verification / reformulation stages standalone or as one
// checkpointed run, shape and export datasets, and score predictions.
//
// Exit codes: 0 success, 1 user error (bad arguments or config),
// 2 runtime failure. Diagnostics go to stderr; data goes to files.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "comvint/config.hpp"
#include "comvint/dataset.hpp"
#include "comvint/eval.hpp"
#include "comvint/http_provider.hpp"
#include "comvint/pipeline.hpp"
#include "comvint/version.hpp"

namespace {

using namespace comvint;

constexpr int kExitOk = 0;
constexpr int kExitUserError = 1;
constexpr int kExitRuntime = 2;

struct CommonArgs {
    std::string config_path;
    std::string mock_script;
    std::string out;
    std::optional<uint64_t> seed;
    bool dry_run = false;
};

PipelineConfig effective_config(const CommonArgs& args) {
    PipelineConfig config = args.config_path.empty() ? PipelineConfig{} : load_config(args.config_path);
    if (args.seed) config.seed = *args.seed;
    validate_config(config);
    return config;
}

std::shared_ptr<ChatProvider> build_provider(const PipelineConfig& config,
                                             const std::string& mock_script) {
    std::shared_ptr<ChatProvider> base;
    if (!mock_script.empty()) {
        base = MockProvider::from_file(mock_script);
    } else {
        base = std::make_shared<HttpProvider>(HttpProvider::from_env(config.base_url));
    }
    std::shared_ptr<ChatProvider> provider =
        std::make_shared<RetryProvider>(base, config.retry);
    if (config.rate_limit.capacity >= 1)
        provider = std::make_shared<RateLimitedProvider>(provider, config.rate_limit);
    return provider;
}

Corpus load_by_format(const std::string& path, const std::string& format, LoadReport* report) {
    if (format == "canonical") return load_corpus(path);
    if (format == "flickr30k_entities") {
        auto [corpus, rep] = load_flickr30k_entities(path);
        if (report) *report = rep;
        return corpus;
    }
    if (format == "visual_genome") {
        auto [corpus, rep] = load_visual_genome(path);
        if (report) *report = rep;
        return corpus;
    }
    throw ConfigInvalid("unknown corpus format '" + format + "'");
}

void print_report(const LoadReport& report) {
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    std::cerr << "images: " << report.images << ", malformed lines skipped: "
              << report.malformed_lines << "\n";
}

int cmd_ingest(const std::string& in, const std::string& format, const std::string& out,
               bool dry_run) {
    LoadReport report;
    Corpus corpus = load_by_format(in, format, &report);
    print_report(report);
    if (dry_run) {
        std::cerr << "dry-run: would write " << corpus.images.size() << " images to " << out << "\n";
        return kExitOk;
    }
    write_corpus(corpus, out);
    return kExitOk;
}

int cmd_select(const std::string& in, const std::string& rule, size_t threshold,
               const std::string& out, bool dry_run) {
    Corpus corpus = load_corpus(in);
    Corpus filtered;
    SelectionReport report;
    if (rule == "richness") {
        std::tie(filtered, report) = filter_by_caption_richness(corpus, threshold);
    } else if (rule == "objects") {
        std::tie(filtered, report) = filter_by_object_count(corpus, threshold);
    } else {
        std::cerr << "error: --rule must be 'richness' or 'objects'\n";
        return kExitUserError;
    }
    std::cerr << selection_report_to_json(report).dump() << "\n";
    if (dry_run) {
        std::cerr << "dry-run: would retain " << report.retained_count << " of "
                  << report.input_count << " images\n";
        return kExitOk;
    }
    write_corpus(filtered, out);
    return kExitOk;
}

int cmd_synthesize(const CommonArgs& args, const std::string& type) {
    PipelineConfig config = effective_config(args);
    TemplateSet templates = load_templates(config);

    std::vector<InstructionRecord> records;
    size_t planned = 0;
    if (type == "cross_modal" || type == "both") {
        if (!config.cross_modal_corpus)
            throw ConfigInvalid("corpus.cross_modal is required for cross-modal synthesis");
        Corpus corpus = load_by_format(config.cross_modal_corpus->path,
                                       config.cross_modal_corpus->format, nullptr);
        auto [filtered, report] = filter_by_caption_richness(corpus, config.caption_char_min);
        std::cerr << selection_report_to_json(report).dump() << "\n";
        planned += filtered.images.size();
        if (!args.dry_run) {
            auto provider = build_provider(config, args.mock_script);
            PipelineOps ops(config, templates, *provider);
            auto out = synthesize_cross_modal(filtered, ops, config);
            records.insert(records.end(), out.begin(), out.end());
        }
    }
    if (type == "outside_knowledge" || type == "both") {
        if (!config.outside_knowledge_corpus)
            throw ConfigInvalid("corpus.outside_knowledge is required for outside-knowledge synthesis");
        Corpus corpus = load_by_format(config.outside_knowledge_corpus->path,
                                       config.outside_knowledge_corpus->format, nullptr);
        auto [filtered, report] = filter_by_object_count(corpus, config.object_count_max);
        std::cerr << selection_report_to_json(report).dump() << "\n";
        CorpusStats stats = compute_corpus_stats(filtered);
        planned += filtered.images.size();
        if (!args.dry_run) {
            auto provider = build_provider(config, args.mock_script);
            PipelineOps ops(config, templates, *provider);
            auto out = synthesize_outside_knowledge(filtered, stats, ops, config);
            records.insert(records.end(), out.begin(), out.end());
        }
    }
    if (args.dry_run) {
        std::cerr << "dry-run: " << planned << " synthesis calls planned\n";
        return kExitOk;
    }
    sort_canonical(records);
    write_records(records, args.out);
    std::cerr << "wrote " << records.size() << " records to " << args.out << "\n";
    return kExitOk;
}

ImageLookup lookup_for(const PipelineConfig& config) {
    auto cm = std::make_shared<std::optional<ImageLookup>>();
    auto ok = std::make_shared<std::optional<ImageLookup>>();
    if (config.cross_modal_corpus)
        *cm = lookup_from_corpus(load_by_format(config.cross_modal_corpus->path,
                                                config.cross_modal_corpus->format, nullptr));
    if (config.outside_knowledge_corpus)
        *ok = lookup_from_corpus(load_by_format(config.outside_knowledge_corpus->path,
                                                config.outside_knowledge_corpus->format, nullptr));
    return [cm, ok](const InstructionRecord& r) -> const AnnotatedImage& {
        auto& primary = r.task_type == TaskType::cross_modal ? *cm : *ok;
        auto& fallback = r.task_type == TaskType::cross_modal ? *ok : *cm;
        if (primary) {
            try {
                return (*primary)(r);
            } catch (const PreconditionViolation&) {
                if (!fallback) throw;
            }
        }
        if (!fallback) throw PreconditionViolation("no corpus configured for " + r.record_id);
        return (*fallback)(r);
    };
}

int cmd_complicate_verify(const CommonArgs& args, const std::string& records_path) {
    PipelineConfig config = effective_config(args);
    TemplateSet templates = load_templates(config);
    auto records = read_records(records_path);
    if (args.dry_run) {
        std::cerr << "dry-run: " << records.size() << " records to verify, up to "
                  << records.size() * static_cast<size_t>(config.complication_rounds) * 2
                  << " complication/verification calls\n";
        return kExitOk;
    }
    auto provider = build_provider(config, args.mock_script);
    PipelineOps ops(config, templates, *provider);
    ImageLookup lookup = lookup_for(config);
    auto judged = verify(records, lookup, ops, config, nullptr, nullptr, "verify_r0");
    auto out = complicate_then_verify(judged, lookup, ops, config);
    sort_canonical(out);
    write_records(out, args.out);
    std::cerr << "wrote " << out.size() << " passed records to " << args.out << "\n";
    return kExitOk;
}

int cmd_reformulate(const CommonArgs& args, const std::string& records_path) {
    PipelineConfig config = effective_config(args);
    TemplateSet templates = load_templates(config);
    auto records = read_records(records_path);
    ReformulationPlan plan = plan_reformulation(records, config.reformulation, config.seed);
    if (args.dry_run) {
        std::cerr << "dry-run: " << plan.source_ids.size() << " conversions planned over "
                  << records.size() << " records\n";
        return kExitOk;
    }
    auto provider = build_provider(config, args.mock_script);
    PipelineOps ops(config, templates, *provider);
    auto out = reformulate(records, ops, config, config.seed);
    sort_canonical(out);
    write_records(out, args.out);
    std::cerr << "wrote " << out.size() << " records to " << args.out << "\n";
    return kExitOk;
}

int cmd_mix(const CommonArgs& args, const std::string& records_path, int total) {
    PipelineConfig config = effective_config(args);
    auto records = read_records(records_path);
    if (args.dry_run) {
        std::cerr << "dry-run: would draw " << total << " records at "
                  << config.mix.cross_modal << ":" << config.mix.outside_knowledge << "\n";
        return kExitOk;
    }
    auto mixed = mix(records, config.mix.cross_modal, config.mix.outside_knowledge,
                     static_cast<size_t>(total), config.seed);
    write_records(mixed, args.out);
    std::cerr << "wrote " << mixed.size() << " records to " << args.out << "\n";
    return kExitOk;
}

int cmd_export(const CommonArgs& args, const std::string& records_path) {
    auto records = read_records(records_path);
    if (args.dry_run) {
        std::cerr << "dry-run: would export " << records.size() << " conversations\n";
        return kExitOk;
    }
    export_conversation_format(records, args.out);
    std::cerr << "exported " << records.size() << " conversations to " << args.out << "\n";
    return kExitOk;
}

int cmd_stats(const std::string& records_path, const std::string& out, bool dry_run) {
    auto records = read_records(records_path);
    if (dry_run) {
        std::cerr << "dry-run: " << records.size() << " records validated\n";
        return kExitOk;
    }
    json j = stats_to_json(stats(records));
    std::cerr << j.dump(2) << "\n";
    if (!out.empty()) write_file_atomic(out, j.dump(2) + "\n");
    return kExitOk;
}

int cmd_eval(const std::string& yesno_path, const std::string& choice_path, const std::string& out,
             bool dry_run) {
    std::vector<eval::YesNoPair> pairs;
    std::vector<eval::ChoiceInstance> instances;
    if (!yesno_path.empty()) pairs = eval::load_yes_no_predictions(yesno_path);
    if (!choice_path.empty()) instances = eval::load_choice_predictions(choice_path);
    if (pairs.empty() && instances.empty()) {
        std::cerr << "error: pass --yesno and/or --choice prediction files\n";
        return kExitUserError;
    }
    if (dry_run) {
        std::cerr << "dry-run: " << pairs.size() << " yes/no instances, " << instances.size()
                  << " choice instances validated\n";
        return kExitOk;
    }
    eval::EvalReport report = eval::evaluate(pairs, instances);
    std::cerr << eval::report_table(report);
    if (!out.empty()) write_file_atomic(out, eval::report_to_json(report).dump(2) + "\n");
    return kExitOk;
}

int cmd_run(const CommonArgs& args, const std::string& resume_id, std::string run_id) {
    PipelineConfig config = effective_config(args);
    std::string out_dir = args.out.empty() ? "runs" : args.out;
    bool resume = !resume_id.empty();
    if (resume) run_id = resume_id;
    if (run_id.empty()) {
        // deterministic default: derived from the effective config
        run_id = "run-" + fingerprint_hex(config_to_json(config).dump()).substr(0, 12);
    }
    if (args.dry_run) {
        size_t cm_images = 0, ok_images = 0;
        if (config.cross_modal_corpus) {
            Corpus c = load_by_format(config.cross_modal_corpus->path,
                                      config.cross_modal_corpus->format, nullptr);
            cm_images = filter_by_caption_richness(c, config.caption_char_min).first.images.size();
        }
        if (config.outside_knowledge_corpus) {
            Corpus c = load_by_format(config.outside_knowledge_corpus->path,
                                      config.outside_knowledge_corpus->format, nullptr);
            ok_images = filter_by_object_count(c, config.object_count_max).first.images.size();
        }
        size_t round0 = cm_images * static_cast<size_t>(config.cross_modal_per_image) +
                        ok_images * static_cast<size_t>(config.outside_knowledge_per_image);
        std::cerr << "dry-run: run " << run_id << "\n"
                  << "  synthesis calls: " << cm_images + ok_images << "\n"
                  << "  round-0 records (if all parse): " << round0 << "\n"
                  << "  verification calls (round 0): " << round0 << "\n"
                  << "  complication rounds: " << config.complication_rounds
                  << " (up to " << round0 * static_cast<size_t>(config.complication_rounds) * 2
                  << " further calls)\n";
        return kExitOk;
    }
    auto provider = build_provider(config, args.mock_script);
    PipelineRunner runner(config, out_dir, run_id, *provider, resume, kVersion);
    auto dataset_path = runner.run();
    std::cerr << "run " << run_id << " complete; dataset at " << dataset_path.string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthesis-complication-reformulation pipeline for visual reasoning "
                 "instruction datasets"};
    app.set_version_flag("--version", comvint::kVersion);
    app.require_subcommand(1);

    CommonArgs args;
    std::string in, format = "canonical", rule, records_path, type = "both";
    std::string resume_id, run_id, yesno_path, choice_path, stats_out;
    size_t threshold = 0;
    int total = 0;

    auto add_common = [&](CLI::App* cmd, bool with_out = true) {
        cmd->add_option("--config", args.config_path, "pipeline config file (JSON)");
        cmd->add_option("--mock-script", args.mock_script, "scripted mock provider file");
        cmd->add_option("--seed", args.seed, "override the config seed");
        if (with_out) cmd->add_option("--out", args.out, "output path")->required();
        cmd->add_flag("--dry-run", args.dry_run, "validate and print planned work only");
    };

    auto* ingest = app.add_subcommand("ingest", "parse a corpus into the canonical record format");
    ingest->add_option("--in", in, "input path")->required();
    ingest->add_option("--format", format, "canonical | flickr30k_entities | visual_genome");
    ingest->add_option("--out", args.out, "output corpus file")->required();
    ingest->add_flag("--dry-run", args.dry_run, "validate and report only");

    auto* select = app.add_subcommand("select", "filter a canonical corpus");
    select->add_option("--in", in, "canonical corpus file")->required();
    select->add_option("--rule", rule, "richness | objects")->required();
    select->add_option("--threshold", threshold, "min chars (richness) or max objects")->required();
    select->add_option("--out", args.out, "output corpus file")->required();
    select->add_flag("--dry-run", args.dry_run, "report without writing");

    auto* synthesize = app.add_subcommand("synthesize", "generate round-0 instructions");
    synthesize->add_option("--type", type, "cross_modal | outside_knowledge | both");
    add_common(synthesize);

    auto* cv = app.add_subcommand("complicate-verify",
                                  "verify round-0 records, then iterate complication rounds");
    cv->add_option("--records", records_path, "round-0 records file")->required();
    add_common(cv);

    auto* reform = app.add_subcommand("reformulate", "convert sampled records to bool/multi-choice");
    reform->add_option("--records", records_path, "passed open-ended records file")->required();
    add_common(reform);

    auto* mix_cmd = app.add_subcommand("mix", "draw an exact task-type mixture");
    mix_cmd->add_option("--records", records_path, "records file")->required();
    mix_cmd->add_option("--total", total, "total records to draw")->required();
    add_common(mix_cmd);

    auto* export_cmd = app.add_subcommand("export", "write the conversation-format export");
    export_cmd->add_option("--records", records_path, "records file")->required();
    add_common(export_cmd);

    auto* stats_cmd = app.add_subcommand("stats", "dataset composition statistics");
    stats_cmd->add_option("--records", records_path, "records file")->required();
    stats_cmd->add_option("--out", stats_out, "write machine-readable stats here");
    stats_cmd->add_flag("--dry-run", args.dry_run, "validate the records file only");

    auto* eval_cmd = app.add_subcommand("eval", "score prediction files");
    eval_cmd->add_option("--yesno", yesno_path, "paired yes/no predictions (one question per line)");
    eval_cmd->add_option("--choice", choice_path, "multi-choice predictions");
    eval_cmd->add_option("--out", stats_out, "write machine-readable report here");
    eval_cmd->add_flag("--dry-run", args.dry_run, "validate the prediction files only");

    auto* run_cmd = app.add_subcommand("run", "full checkpointed pipeline run");
    run_cmd->add_option("--run-id", run_id, "run identifier (defaults to a config digest)");
    run_cmd->add_option("--resume", resume_id, "resume an existing run id");
    run_cmd->add_option("--config", args.config_path, "pipeline config file (JSON)");
    run_cmd->add_option("--mock-script", args.mock_script, "scripted mock provider file");
    run_cmd->add_option("--seed", args.seed, "override the config seed");
    run_cmd->add_option("--out", args.out, "run directory root (default: runs/)");
    run_cmd->add_flag("--dry-run", args.dry_run, "validate and print planned work only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUserError;
    }

    try {
        if (ingest->parsed()) return cmd_ingest(in, format, args.out, args.dry_run);
        if (select->parsed()) return cmd_select(in, rule, threshold, args.out, args.dry_run);
        if (synthesize->parsed()) return cmd_synthesize(args, type);
        if (cv->parsed()) return cmd_complicate_verify(args, records_path);
        if (reform->parsed()) return cmd_reformulate(args, records_path);
        if (mix_cmd->parsed()) return cmd_mix(args, records_path, total);
        if (export_cmd->parsed()) return cmd_export(args, records_path);
        if (stats_cmd->parsed()) return cmd_stats(records_path, stats_out, args.dry_run);
        if (eval_cmd->parsed()) return cmd_eval(yesno_path, choice_path, stats_out, args.dry_run);
        if (run_cmd->parsed()) return cmd_run(args, resume_id, run_id);
    } catch (const comvint::ConfigInvalid& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const comvint::PreconditionViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const comvint::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUserError;
}
