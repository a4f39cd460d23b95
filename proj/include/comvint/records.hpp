#pragma once

// InstructionRecord: one (instruction, response) pair with task type,
// format, complication round, lineage and verification status. Carries the
// canonical JSON mapping used by the record stream and dataset files.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/util.hpp"

namespace comvint {

using json = nlohmann::json;

enum class TaskType { cross_modal, outside_knowledge };
enum class RecordFormat { open_ended, bool_qa, multi_choice };
enum class VerificationStatus { unverified, passed, failed };

inline std::string to_string(TaskType t) {
    return t == TaskType::cross_modal ? "cross_modal" : "outside_knowledge";
}

inline std::string to_string(RecordFormat f) {
    switch (f) {
        case RecordFormat::open_ended: return "open_ended";
        case RecordFormat::bool_qa: return "bool";
        case RecordFormat::multi_choice: return "multi_choice";
    }
    return "open_ended";
}

inline std::string to_string(VerificationStatus s) {
    switch (s) {
        case VerificationStatus::unverified: return "unverified";
        case VerificationStatus::passed: return "passed";
        case VerificationStatus::failed: return "failed";
    }
    return "unverified";
}

struct InstructionRecord {
    std::string record_id;
    std::string image_id;
    TaskType task_type = TaskType::cross_modal;
    RecordFormat format = RecordFormat::open_ended;
    std::string instruction;
    std::string response;
    std::vector<std::string> options;       // multi_choice only, exactly 4
    std::optional<int> correct_option;      // multi_choice only, 0..3
    int complication_round = 0;
    std::optional<std::string> parent_id;
    VerificationStatus verification_status = VerificationStatus::unverified;
    std::string template_fingerprint;
    std::string model;

    bool operator==(const InstructionRecord&) const = default;
};

namespace detail {

inline TaskType task_type_from_string(const std::string& s, size_t line) {
    if (s == "cross_modal") return TaskType::cross_modal;
    if (s == "outside_knowledge") return TaskType::outside_knowledge;
    throw SchemaViolation("unknown task_type '" + s + "'", line);
}

inline RecordFormat format_from_string(const std::string& s, size_t line) {
    if (s == "open_ended") return RecordFormat::open_ended;
    if (s == "bool") return RecordFormat::bool_qa;
    if (s == "multi_choice") return RecordFormat::multi_choice;
    throw SchemaViolation("unknown format '" + s + "'", line);
}

inline VerificationStatus status_from_string(const std::string& s, size_t line) {
    if (s == "unverified") return VerificationStatus::unverified;
    if (s == "passed") return VerificationStatus::passed;
    if (s == "failed") return VerificationStatus::failed;
    throw SchemaViolation("unknown verification_status '" + s + "'", line);
}

}  // namespace detail

/// Enforces the structural invariants; throws SchemaViolation with the
/// originating line (0 for in-memory records).
inline void validate_record(const InstructionRecord& r, size_t line = 0) {
    if (r.record_id.empty()) throw SchemaViolation("record_id is empty", line);
    if (r.image_id.empty()) throw SchemaViolation("image_id is empty", line);
    if (r.instruction.empty()) throw SchemaViolation("instruction is empty", line);
    if (r.response.empty()) throw SchemaViolation("response is empty", line);
    if (r.complication_round < 0) throw SchemaViolation("complication_round < 0", line);
    if (r.format == RecordFormat::multi_choice) {
        if (r.options.size() != 4)
            throw SchemaViolation("multi_choice record needs exactly 4 options", line);
        if (!r.correct_option || *r.correct_option < 0 || *r.correct_option >= 4)
            throw SchemaViolation("correct_option must index the options", line);
    } else {
        if (!r.options.empty() || r.correct_option)
            throw SchemaViolation("options are only valid on multi_choice records", line);
    }
    if (r.format == RecordFormat::bool_qa && r.response != "yes" && r.response != "no")
        throw SchemaViolation("bool record response must be 'yes' or 'no'", line);
}

inline json record_to_json(const InstructionRecord& r) {
    json j;
    j["record_id"] = r.record_id;
    j["image_id"] = r.image_id;
    j["task_type"] = to_string(r.task_type);
    j["format"] = to_string(r.format);
    j["instruction"] = r.instruction;
    j["response"] = r.response;
    if (r.format == RecordFormat::multi_choice) {
        j["options"] = r.options;
        j["correct_option"] = *r.correct_option;
    }
    j["complication_round"] = r.complication_round;
    if (r.parent_id) j["parent_id"] = *r.parent_id;
    j["verification_status"] = to_string(r.verification_status);
    j["template_fingerprint"] = r.template_fingerprint;
    j["model"] = r.model;
    return j;
}

inline InstructionRecord record_from_json(const json& j, size_t line) {
    static const std::set<std::string> allowed = {
        "record_id",  "image_id",  "task_type",           "format",
        "instruction", "response", "options",             "correct_option",
        "complication_round",      "parent_id",           "verification_status",
        "template_fingerprint",    "model"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw SchemaViolation("unknown record field '" + it.key() + "'", line);
    for (const char* required : {"record_id", "image_id", "task_type", "format", "instruction",
                                 "response", "complication_round", "verification_status"})
        if (!j.contains(required))
            throw SchemaViolation(std::string("record missing '") + required + "'", line);

    InstructionRecord r;
    r.record_id = j["record_id"].get<std::string>();
    r.image_id = j["image_id"].get<std::string>();
    r.task_type = detail::task_type_from_string(j["task_type"].get<std::string>(), line);
    r.format = detail::format_from_string(j["format"].get<std::string>(), line);
    r.instruction = j["instruction"].get<std::string>();
    r.response = j["response"].get<std::string>();
    if (j.contains("options")) r.options = j["options"].get<std::vector<std::string>>();
    if (j.contains("correct_option")) r.correct_option = j["correct_option"].get<int>();
    r.complication_round = j["complication_round"].get<int>();
    if (j.contains("parent_id")) r.parent_id = j["parent_id"].get<std::string>();
    r.verification_status =
        detail::status_from_string(j["verification_status"].get<std::string>(), line);
    r.template_fingerprint = j.value("template_fingerprint", "");
    r.model = j.value("model", "");
    validate_record(r, line);
    return r;
}

/// Dedup key normalization: lowercase, collapse whitespace, strip trailing
/// punctuation.
inline std::string normalize_instruction_key(std::string_view instruction) {
    std::string s = collapse_whitespace(to_lower_ascii(instruction));
    while (!s.empty()) {
        char c = s.back();
        if (c == '?' || c == '.' || c == '!' || c == ',' || c == ';' || c == ':' || c == ' ' ||
            c == '"' || c == '\'')
            s.pop_back();
        else
            break;
    }
    return s;
}

}  // namespace comvint
