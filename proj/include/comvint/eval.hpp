#pragma once

// Benchmark metrics: paired yes/no accuracy (ACC+ convention, both
// questions of an instance must be right) and multi-choice accuracy with
// letter-or-text answer matching.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/records.hpp"
#include "comvint/util.hpp"

namespace comvint::eval {

using nlohmann::json;

enum class YesNo { yes, no, unknown };

inline std::string to_string(YesNo v) {
    switch (v) {
        case YesNo::yes: return "yes";
        case YesNo::no: return "no";
        case YesNo::unknown: return "unknown";
    }
    return "unknown";
}

/// Case-insensitive; the leading yes/no token (after stripping punctuation
/// and fillers such as "answer:") decides. No clear leading signal scores
/// as unknown, and unknown counts as incorrect.
inline YesNo normalize_yes_no(std::string_view text) {
    std::string s = to_lower_ascii(text);
    // strip leading punctuation/whitespace
    size_t b = 0;
    while (b < s.size() && !std::isalnum(static_cast<unsigned char>(s[b]))) ++b;
    s = s.substr(b);
    for (const char* filler : {"the answer is", "answer is", "answer", "response", "prediction"}) {
        if (s.rfind(filler, 0) == 0) {
            s = s.substr(std::string(filler).size());
            size_t c = 0;
            while (c < s.size() &&
                   (std::isspace(static_cast<unsigned char>(s[c])) || s[c] == ':' || s[c] == '-'))
                ++c;
            s = s.substr(c);
            break;
        }
    }
    std::string token;
    for (char c : s) {
        if (std::isalpha(static_cast<unsigned char>(c)))
            token.push_back(c);
        else
            break;
    }
    if (token == "yes") return YesNo::yes;
    if (token == "no") return YesNo::no;
    return YesNo::unknown;
}

struct YesNoQuestion {
    std::string question;
    YesNo gold = YesNo::yes;
    std::string prediction;  // raw model output

    bool correct() const { return normalize_yes_no(prediction) == gold; }
};

struct YesNoPair {
    std::string image_id;
    std::string subtask;
    YesNoQuestion q1;
    YesNoQuestion q2;
};

struct ChoiceInstance {
    std::string image_id;
    std::string task;
    std::vector<std::string> options;  // exactly 4
    int gold_index = 0;
    std::string prediction;
};

template <typename Items>
double acc_impl(const Items& items, size_t correct) {
    if (items.empty()) throw EmptyInput("accuracy over an empty item list");
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

/// Plain question-level accuracy over (gold, prediction) items.
inline double acc(const std::vector<YesNoQuestion>& items) {
    size_t correct = 0;
    for (const auto& q : items) correct += q.correct() ? 1 : 0;
    return acc_impl(items, correct);
}

inline std::vector<YesNoQuestion> flatten(const std::vector<YesNoPair>& pairs) {
    std::vector<YesNoQuestion> out;
    out.reserve(pairs.size() * 2);
    for (const auto& p : pairs) {
        out.push_back(p.q1);
        out.push_back(p.q2);
    }
    return out;
}

/// Fraction of instances where BOTH questions are answered correctly.
inline double acc_plus(const std::vector<YesNoPair>& pairs) {
    if (pairs.empty()) throw EmptyInput("acc_plus over an empty pair list");
    size_t correct = 0;
    for (const auto& p : pairs) correct += (p.q1.correct() && p.q2.correct()) ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

/// Per-subtask score: 100 x question accuracy + 100 x ACC+, so a perfect
/// subtask scores 200. Benchmark total = sum over subtasks.
inline double mme_subtask_score(const std::vector<YesNoPair>& pairs) {
    if (pairs.empty()) throw EmptyInput("subtask score over an empty pair list");
    return 100.0 * acc(flatten(pairs)) + 100.0 * acc_plus(pairs);
}

/// Prediction matching for multi-choice: a leading letter A-D wins, else an
/// exact normalized option-text match; anything ambiguous is incorrect.
inline bool choice_correct(const ChoiceInstance& inst) {
    std::string s = trim(inst.prediction);
    // optional leading punctuation like "(" before the letter
    size_t b = 0;
    while (b < s.size() && !std::isalnum(static_cast<unsigned char>(s[b]))) ++b;
    if (b < s.size()) {
        char c = static_cast<char>(std::toupper(static_cast<unsigned char>(s[b])));
        bool boundary = b + 1 >= s.size() || !std::isalnum(static_cast<unsigned char>(s[b + 1]));
        if (c >= 'A' && c <= 'D' && boundary) return (c - 'A') == inst.gold_index;
    }
    std::string norm = normalize_instruction_key(inst.prediction);
    for (size_t i = 0; i < inst.options.size(); ++i)
        if (!norm.empty() && norm == normalize_instruction_key(inst.options[i]))
            return static_cast<int>(i) == inst.gold_index;
    return false;
}

inline double choice_accuracy(const std::vector<ChoiceInstance>& instances) {
    if (instances.empty()) throw EmptyInput("choice accuracy over an empty instance list");
    size_t correct = 0;
    for (const auto& inst : instances) correct += choice_correct(inst) ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------
// Prediction files. Yes/no: one record per question
//   {image_id, subtask, question_index (1|2), question?, gold, prediction}
// grouped into instances by (image_id, subtask). Choice: one per instance
//   {image_id, task, options, gold_index, prediction}.

inline YesNo yes_no_from_string(const std::string& s, size_t line) {
    if (s == "yes") return YesNo::yes;
    if (s == "no") return YesNo::no;
    throw SchemaViolation("gold must be 'yes' or 'no', got '" + s + "'", line);
}

inline std::vector<YesNoPair> load_yes_no_predictions(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    std::map<std::pair<std::string, std::string>, YesNoPair> pairs;
    std::map<std::pair<std::string, std::string>, std::pair<bool, bool>> seen;
    std::vector<std::pair<std::string, std::string>> order;
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON", line_no);
        for (const char* req : {"image_id", "subtask", "question_index", "gold", "prediction"})
            if (!j.contains(req))
                throw SchemaViolation(std::string("prediction missing '") + req + "'", line_no);
        auto key = std::make_pair(j["image_id"].get<std::string>(), j["subtask"].get<std::string>());
        if (!pairs.count(key)) order.push_back(key);
        YesNoPair& pair = pairs[key];
        pair.image_id = key.first;
        pair.subtask = key.second;
        int idx = j["question_index"].get<int>();
        if (idx != 1 && idx != 2) throw SchemaViolation("question_index must be 1 or 2", line_no);
        YesNoQuestion q;
        q.question = j.value("question", "");
        q.gold = yes_no_from_string(j["gold"].get<std::string>(), line_no);
        q.prediction = j["prediction"].get<std::string>();
        auto& have = seen[key];
        if ((idx == 1 && have.first) || (idx == 2 && have.second))
            throw SchemaViolation("duplicate question_index for instance", line_no);
        (idx == 1 ? pair.q1 : pair.q2) = q;
        (idx == 1 ? have.first : have.second) = true;
    }
    std::vector<YesNoPair> out;
    for (const auto& key : order) {
        const auto& have = seen[key];
        if (!have.first || !have.second)
            throw SchemaViolation("instance '" + key.first + "/" + key.second +
                                      "' is missing one of its two questions",
                                  0);
        out.push_back(pairs[key]);
    }
    return out;
}

inline std::vector<ChoiceInstance> load_choice_predictions(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    std::vector<ChoiceInstance> out;
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON", line_no);
        for (const char* req : {"image_id", "task", "options", "gold_index", "prediction"})
            if (!j.contains(req))
                throw SchemaViolation(std::string("prediction missing '") + req + "'", line_no);
        ChoiceInstance inst;
        inst.image_id = j["image_id"].get<std::string>();
        inst.task = j["task"].get<std::string>();
        inst.options = j["options"].get<std::vector<std::string>>();
        if (inst.options.size() != 4)
            throw SchemaViolation("choice instance needs exactly 4 options", line_no);
        inst.gold_index = j["gold_index"].get<int>();
        if (inst.gold_index < 0 || inst.gold_index > 3)
            throw SchemaViolation("gold_index must be 0..3", line_no);
        inst.prediction = j["prediction"].get<std::string>();
        out.push_back(std::move(inst));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report: plain-text table plus a machine-readable record.

struct EvalReport {
    // subtask -> (pairs, acc, acc_plus, score)
    struct SubtaskRow {
        size_t instances = 0;
        double acc = 0.0;
        double acc_plus = 0.0;
        double score = 0.0;
    };
    std::map<std::string, SubtaskRow> yes_no_subtasks;
    double yes_no_total_score = 0.0;
    std::map<std::string, std::pair<size_t, double>> choice_tasks;  // task -> (n, acc)
    std::optional<double> choice_overall;
};

inline EvalReport evaluate(const std::vector<YesNoPair>& yes_no,
                           const std::vector<ChoiceInstance>& choice) {
    EvalReport report;
    std::map<std::string, std::vector<YesNoPair>> by_subtask;
    for (const auto& p : yes_no) by_subtask[p.subtask].push_back(p);
    for (const auto& [subtask, pairs] : by_subtask) {
        EvalReport::SubtaskRow row;
        row.instances = pairs.size();
        row.acc = acc(flatten(pairs));
        row.acc_plus = acc_plus(pairs);
        row.score = mme_subtask_score(pairs);
        report.yes_no_total_score += row.score;
        report.yes_no_subtasks[subtask] = row;
    }
    if (!choice.empty()) {
        std::map<std::string, std::vector<ChoiceInstance>> by_task;
        for (const auto& inst : choice) by_task[inst.task].push_back(inst);
        for (const auto& [task, insts] : by_task)
            report.choice_tasks[task] = {insts.size(), choice_accuracy(insts)};
        report.choice_overall = choice_accuracy(choice);
    }
    return report;
}

inline std::string format_fraction(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

inline std::string report_table(const EvalReport& report) {
    std::string out;
    if (!report.yes_no_subtasks.empty()) {
        out += "yes/no (paired)\n";
        out += "  subtask                    n      acc     acc+    score\n";
        for (const auto& [subtask, row] : report.yes_no_subtasks) {
            char line[160];
            std::snprintf(line, sizeof(line), "  %-24s %4zu   %s   %s   %7.2f\n", subtask.c_str(),
                          row.instances, format_fraction(row.acc).c_str(),
                          format_fraction(row.acc_plus).c_str(), row.score);
            out += line;
        }
        char total[80];
        std::snprintf(total, sizeof(total), "  total score: %.2f\n", report.yes_no_total_score);
        out += total;
    }
    if (report.choice_overall) {
        out += "multi-choice\n";
        out += "  task                       n      acc\n";
        for (const auto& [task, row] : report.choice_tasks) {
            char line[160];
            std::snprintf(line, sizeof(line), "  %-24s %4zu   %s\n", task.c_str(), row.first,
                          format_fraction(row.second).c_str());
            out += line;
        }
        out += "  overall: " + format_fraction(*report.choice_overall) + "\n";
    }
    return out;
}

inline json report_to_json(const EvalReport& report) {
    json j;
    json subtasks = json::object();
    for (const auto& [subtask, row] : report.yes_no_subtasks)
        subtasks[subtask] = {{"instances", row.instances},
                             {"acc", row.acc},
                             {"acc_plus", row.acc_plus},
                             {"score", row.score}};
    j["yes_no"] = {{"subtasks", subtasks}, {"total_score", report.yes_no_total_score}};
    if (report.choice_overall) {
        json tasks = json::object();
        for (const auto& [task, row] : report.choice_tasks)
            tasks[task] = {{"instances", row.first}, {"acc", row.second}};
        j["choice"] = {{"tasks", tasks}, {"overall_acc", *report.choice_overall}};
    }
    return j;
}

}  // namespace comvint::eval
