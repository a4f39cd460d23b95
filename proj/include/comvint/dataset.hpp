#pragma once

// Dataset persistence and shaping: the canonical newline-delimited record
// file, round subsets, deterministic type mixing, the two-turn
// conversation export, and composition statistics.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "comvint/errors.hpp"
#include "comvint/records.hpp"
#include "comvint/util.hpp"

namespace comvint {

inline std::string records_to_string(const std::vector<InstructionRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void write_records(const std::vector<InstructionRecord>& records,
                          const std::filesystem::path& path) {
    try {
        write_file_atomic(path, records_to_string(records));
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
}

inline std::vector<InstructionRecord> read_records(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    std::vector<InstructionRecord> records;
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON", line_no);
        records.push_back(record_from_json(j, line_no));
    }
    return records;
}

inline void sort_canonical(std::vector<InstructionRecord>& records) {
    std::sort(records.begin(), records.end(),
              [](const InstructionRecord& a, const InstructionRecord& b) {
                  return a.record_id < b.record_id;
              });
}

/// Passed records with complication_round <= max_round: max_round 0 is the
/// primary set, 1 adds the first complication round, and so on.
inline std::vector<InstructionRecord> subset_by_round(const std::vector<InstructionRecord>& records,
                                                      int max_round) {
    if (max_round < 0) throw PreconditionViolation("max_round must be >= 0");
    std::vector<InstructionRecord> out;
    for (const auto& r : records)
        if (r.complication_round <= max_round && r.verification_status == VerificationStatus::passed)
            out.push_back(r);
    return out;
}

/// Deterministic uniform sample hitting the target task-type shares
/// exactly: cross_modal gets round-half-up of its proportional share,
/// outside_knowledge the remainder.
inline std::vector<InstructionRecord> mix(const std::vector<InstructionRecord>& records,
                                          int target_cross_modal, int target_outside_knowledge,
                                          size_t total, uint64_t rng_seed) {
    if (target_cross_modal <= 0 || target_outside_knowledge <= 0)
        throw PreconditionViolation("mix targets must be positive");
    std::vector<InstructionRecord> cm_pool, ok_pool;
    for (const auto& r : records)
        (r.task_type == TaskType::cross_modal ? cm_pool : ok_pool).push_back(r);
    sort_canonical(cm_pool);
    sort_canonical(ok_pool);

    const double ratio = static_cast<double>(target_cross_modal) /
                         static_cast<double>(target_cross_modal + target_outside_knowledge);
    const size_t cm_share = static_cast<size_t>(round_half_up(static_cast<double>(total) * ratio));
    const size_t ok_share = total - cm_share;
    if (cm_pool.size() < cm_share)
        throw InsufficientRecords("cross_modal", cm_share, cm_pool.size());
    if (ok_pool.size() < ok_share)
        throw InsufficientRecords("outside_knowledge", ok_share, ok_pool.size());

    std::vector<InstructionRecord> out;
    for (size_t i : sample_indices(cm_pool.size(), cm_share, rng_seed ^ fnv1a64("mix/cross_modal")))
        out.push_back(cm_pool[i]);
    for (size_t i :
         sample_indices(ok_pool.size(), ok_share, rng_seed ^ fnv1a64("mix/outside_knowledge")))
        out.push_back(ok_pool[i]);
    sort_canonical(out);
    return out;
}

/// Two-turn conversation export: one object per record, multi-choice
/// options rendered as "A. ..." lines and the response as the correct
/// letter plus option text.
inline json conversation_json(const std::vector<InstructionRecord>& records) {
    json arr = json::array();
    for (const auto& r : records) {
        std::string human = r.instruction;
        std::string gpt = r.response;
        if (r.format == RecordFormat::multi_choice) {
            for (size_t i = 0; i < r.options.size(); ++i) {
                human += '\n';
                human += static_cast<char>('A' + i);
                human += ". ";
                human += r.options[i];
            }
            size_t correct = static_cast<size_t>(*r.correct_option);
            gpt = std::string(1, static_cast<char>('A' + correct)) + ". " + r.options[correct];
        }
        arr.push_back({{"id", r.record_id},
                       {"image", r.image_id},
                       {"conversations",
                        json::array({{{"from", "human"}, {"value", human}},
                                     {{"from", "gpt"}, {"value", gpt}}})}});
    }
    return arr;
}

inline std::filesystem::path export_conversation_format(
    const std::vector<InstructionRecord>& records, const std::filesystem::path& path) {
    try {
        write_file_atomic(path, conversation_json(records).dump(2) + "\n");
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    return path;
}

// ---------------------------------------------------------------------------
// Composition statistics.

struct DatasetStats {
    size_t total = 0;
    // keys: task_type, format, round as strings for stable JSON output
    std::map<std::string, size_t> by_task_type;
    std::map<std::string, size_t> by_format;
    std::map<int, size_t> by_round;
    std::map<int, size_t> passed_by_round;
    std::map<int, size_t> judged_by_round;  // passed + failed
    double mean_instruction_length = 0.0;
    size_t min_instruction_length = 0;
    size_t max_instruction_length = 0;

    double pass_rate(int round) const {
        auto it = judged_by_round.find(round);
        if (it == judged_by_round.end() || it->second == 0) return 0.0;
        auto p = passed_by_round.find(round);
        return static_cast<double>(p == passed_by_round.end() ? 0 : p->second) /
               static_cast<double>(it->second);
    }
};

inline DatasetStats stats(const std::vector<InstructionRecord>& records) {
    DatasetStats s;
    s.total = records.size();
    size_t sum_len = 0;
    size_t min_len = SIZE_MAX;
    for (const auto& r : records) {
        ++s.by_task_type[to_string(r.task_type)];
        ++s.by_format[to_string(r.format)];
        ++s.by_round[r.complication_round];
        if (r.verification_status != VerificationStatus::unverified) {
            ++s.judged_by_round[r.complication_round];
            if (r.verification_status == VerificationStatus::passed)
                ++s.passed_by_round[r.complication_round];
        }
        size_t len = utf8_scalar_count(r.instruction);
        sum_len += len;
        min_len = std::min(min_len, len);
        s.max_instruction_length = std::max(s.max_instruction_length, len);
    }
    if (!records.empty()) {
        s.mean_instruction_length = static_cast<double>(sum_len) / static_cast<double>(records.size());
        s.min_instruction_length = min_len;
    }
    return s;
}

inline json stats_to_json(const DatasetStats& s) {
    json rounds = json::object();
    for (const auto& [round, count] : s.by_round) {
        rounds[std::to_string(round)] = {{"count", count}, {"pass_rate", s.pass_rate(round)}};
    }
    return json{{"total", s.total},
                {"by_task_type", s.by_task_type},
                {"by_format", s.by_format},
                {"by_round", rounds},
                {"instruction_length",
                 {{"mean", s.mean_instruction_length},
                  {"min", s.min_instruction_length},
                  {"max", s.max_instruction_length}}}};
}

}  // namespace comvint
