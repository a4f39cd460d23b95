#pragma once

// The five prompt families used by the pipeline: synthesis of cross-modal
// and outside-knowledge instructions, complication, verification, and the
// two reformulation targets. Templates are plain text with {placeholder}
// tokens; the shipped defaults can be overridden with files so exact
// wordings can be dropped in without rebuilding.

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "comvint/annotations.hpp"
#include "comvint/errors.hpp"
#include "comvint/records.hpp"
#include "comvint/util.hpp"

namespace comvint {

enum class PromptFamily {
    cross_modal_synthesis,
    outside_knowledge_synthesis,
    complication,
    verification,
    reformulate_bool,
    reformulate_multichoice,
};

inline constexpr std::array<PromptFamily, 6> kAllPromptFamilies = {
    PromptFamily::cross_modal_synthesis, PromptFamily::outside_knowledge_synthesis,
    PromptFamily::complication,          PromptFamily::verification,
    PromptFamily::reformulate_bool,      PromptFamily::reformulate_multichoice,
};

inline std::string to_string(PromptFamily f) {
    switch (f) {
        case PromptFamily::cross_modal_synthesis: return "cross_modal_synthesis";
        case PromptFamily::outside_knowledge_synthesis: return "outside_knowledge_synthesis";
        case PromptFamily::complication: return "complication";
        case PromptFamily::verification: return "verification";
        case PromptFamily::reformulate_bool: return "reformulate_bool";
        case PromptFamily::reformulate_multichoice: return "reformulate_multichoice";
    }
    return "?";
}

struct PromptTemplate {
    PromptFamily family = PromptFamily::cross_modal_synthesis;
    std::string body;
    std::set<std::string> required_placeholders;

    std::string fingerprint() const { return fingerprint_hex(body); }
};

namespace detail {

inline std::set<std::string> body_placeholders(std::string_view body) {
    std::set<std::string> found;
    for (size_t i = 0; i < body.size(); ++i) {
        if (body[i] != '{') continue;
        size_t close = body.find('}', i + 1);
        if (close == std::string_view::npos) break;
        std::string_view token = body.substr(i + 1, close - i - 1);
        bool ok = !token.empty();
        for (char c : token)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') ok = false;
        if (ok) {
            found.emplace(token);
            i = close;
        }
    }
    return found;
}

}  // namespace detail

/// Replaces every {placeholder} in the body with its binding, verbatim.
/// A body placeholder without a binding is a MissingBinding; a binding
/// without a body placeholder is an UnknownPlaceholder.
inline std::string render(const PromptTemplate& tmpl,
                          const std::map<std::string, std::string>& bindings) {
    std::string out;
    out.reserve(tmpl.body.size());
    std::set<std::string> used;
    const std::string& body = tmpl.body;
    for (size_t i = 0; i < body.size(); ++i) {
        if (body[i] != '{') {
            out.push_back(body[i]);
            continue;
        }
        size_t close = body.find('}', i + 1);
        std::string token = close == std::string::npos ? "" : body.substr(i + 1, close - i - 1);
        bool token_ok = !token.empty();
        for (char c : token)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') token_ok = false;
        if (!token_ok) {
            out.push_back(body[i]);
            continue;
        }
        auto it = bindings.find(token);
        if (it == bindings.end())
            throw MissingBinding("no binding for placeholder {" + token + "}");
        out += it->second;
        used.insert(token);
        i = close;
    }
    for (const auto& [key, value] : bindings)
        if (!used.count(key))
            throw UnknownPlaceholder("binding '" + key + "' has no placeholder in the template");
    return out;
}

// ---------------------------------------------------------------------------
// Default template bodies. The task wording mirrors the prompts the
// pipeline was designed around; the trailing layout contract makes the
// responses machine-parsable.

inline const std::set<std::string>& required_placeholders(PromptFamily family) {
    static const std::map<PromptFamily, std::set<std::string>> req = {
        {PromptFamily::cross_modal_synthesis, {"count", "captions", "objects"}},
        {PromptFamily::outside_knowledge_synthesis,
         {"captions", "topic_entity", "topic_caption", "categories"}},
        {PromptFamily::complication, {"instruction", "response", "captions", "objects"}},
        {PromptFamily::verification, {"instruction", "response", "captions", "objects"}},
        {PromptFamily::reformulate_bool, {"instruction", "response"}},
        {PromptFamily::reformulate_multichoice, {"instruction", "response"}},
    };
    return req.at(family);
}

inline std::string default_template_body(PromptFamily family) {
    switch (family) {
        case PromptFamily::cross_modal_synthesis:
            return "Please design {count} cross-modal reasoning instructions based on the "
                   "annotations to test whether a person has carefully observed and thought about "
                   "the image. These instructions must meet the following conditions: 1. The "
                   "questions should involve details in the image and use as many entities as "
                   "possible. 2. The questions and answers should be as diverse as possible. 3. "
                   "Answering should require reasoning over the relations between several "
                   "entities, not just restating a single caption. Some useful tips: you can swap "
                   "some entities to confuse the test-taker, which will make the questions more "
                   "challenging.\n\n"
                   "Image captions:\n{captions}\n\n"
                   "Entities in the image:\n{objects}\n\n"
                   "Reply using exactly this layout, one block per instruction, numbered "
                   "consecutively from 1:\n"
                   "Question 1: <instruction>\nAnswer 1: <response>\n";
        case PromptFamily::outside_knowledge_synthesis:
            return "Please design 1 outside-knowledge reasoning instruction grounded in the image "
                   "annotations below. The instruction should involve one or more hops of complex "
                   "knowledge and complex reasoning based on the image. Ensure that the knowledge "
                   "and reasoning chains in the instructions are precise and sufficiently "
                   "challenging, to the extent that only well-educated people and experts in the "
                   "respective field can provide adequate responses.\n\n"
                   "Image captions:\n{captions}\n\n"
                   "Topic entity: {topic_entity}\n"
                   "Topic entity details: {topic_caption}\n\n"
                   "The instruction should pertain to knowledge in the following categories: "
                   "{categories}.\n\n"
                   "Reply using exactly this layout:\n"
                   "Question 1: <instruction>\nAnswer 1: <response>\n";
        case PromptFamily::complication:
            return "You are a Prompt Rewriter. Your task is to rewrite a given visual instruction "
                   "into a more complex one to make it challenging for those famous AI systems "
                   "(e.g., GPT-4 and GPT-4V) and well-educated humans. The rewriting process "
                   "should mainly focus on introducing multi-hop outside knowledge about key "
                   "objects in the image or complex reasoning to enhance the complexity of the "
                   "given visual instruction. The rewritten instruction must stay answerable from "
                   "the image and its annotations.\n\n"
                   "Image captions:\n{captions}\n\n"
                   "Entities in the image:\n{objects}\n\n"
                   "Given instruction: {instruction}\n"
                   "Given response: {response}\n\n"
                   "Reply using exactly this layout:\n"
                   "Question 1: <rewritten instruction>\nAnswer 1: <response>\n";
        case PromptFamily::verification:
            return "You are a Prompt Judge. You are given a candidate visual instruction with its "
                   "response, together with the image annotations it was generated from. To "
                   "determine if visual instruction meets high standards, consider the following "
                   "principles: 1. Both the instruction and the response should consistently "
                   "align with the content of the image. There should be no contradictions or "
                   "inconsistencies. 2. Instructions that can be answered solely based on the "
                   "textual component without relying on image information are not considered "
                   "high-quality visual instructions.\n\n"
                   "Image captions:\n{captions}\n\n"
                   "Entities in the image:\n{objects}\n\n"
                   "Candidate instruction: {instruction}\n"
                   "Candidate response: {response}\n\n"
                   "Briefly justify your judgment, then finish with a single final line of "
                   "exactly the form:\nVerdict: yes\nor\nVerdict: no\n";
        case PromptFamily::reformulate_bool:
            return "Convert the visual instruction below into a bool QA instruction: a question "
                   "whose expected answer is binary, i.e., \"yes\" or \"no\". The converted "
                   "question must be answerable from the same image and must agree with the "
                   "original response.\n\n"
                   "Original instruction: {instruction}\n"
                   "Original response: {response}\n\n"
                   "Reply using exactly this layout:\n"
                   "Question 1: <yes-or-no question>\nAnswer 1: <yes or no>\n";
        case PromptFamily::reformulate_multichoice:
            return "Convert the visual instruction below into a multi-choice QA instruction with "
                   "four pre-defined answer options, exactly one of which is correct. The "
                   "distractor options must be plausible but wrong given the original response.\n\n"
                   "Original instruction: {instruction}\n"
                   "Original response: {response}\n\n"
                   "Reply using exactly this layout:\n"
                   "Question 1: <question>\n"
                   "Option A: <option>\nOption B: <option>\nOption C: <option>\nOption D: <option>\n"
                   "Answer 1: <letter of the correct option>\n";
    }
    return "";
}

inline PromptTemplate make_template(PromptFamily family, std::string body) {
    PromptTemplate t;
    t.family = family;
    t.body = std::move(body);
    t.required_placeholders = required_placeholders(family);
    auto found = detail::body_placeholders(t.body);
    for (const auto& name : t.required_placeholders) {
        size_t occurrences = 0;
        std::string token = "{" + name + "}";
        for (size_t pos = t.body.find(token); pos != std::string::npos;
             pos = t.body.find(token, pos + 1))
            ++occurrences;
        if (occurrences != 1)
            throw ConfigInvalid("template " + to_string(family) + ": placeholder {" + name +
                                "} must occur exactly once, found " + std::to_string(occurrences));
    }
    for (const auto& name : found)
        if (!t.required_placeholders.count(name))
            throw ConfigInvalid("template " + to_string(family) + ": unexpected placeholder {" +
                                name + "}");
    return t;
}

inline PromptTemplate default_template(PromptFamily family) {
    return make_template(family, default_template_body(family));
}

inline PromptTemplate load_template_file(PromptFamily family, const std::filesystem::path& path) {
    try {
        return make_template(family, read_file(path));
    } catch (const ConfigInvalid&) {
        throw;
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
}

// ---------------------------------------------------------------------------
// Knowledge categories (outside-knowledge suffix prompt).

/// The ten knowledge categories of the OK-VQA taxonomy; the default pool
/// the category suffix samples from. Overridable in config.
inline std::vector<std::string> default_knowledge_categories() {
    return {
        "Vehicles and Transportation",
        "Brands, Companies and Products",
        "Objects, Material and Clothing",
        "Sports and Recreation",
        "Cooking and Food",
        "Geography, History, Language and Culture",
        "People and Everyday Life",
        "Plants and Animals",
        "Science and Technology",
        "Weather and Climate",
    };
}

struct KnowledgeCategorySet {
    std::vector<std::string> categories;
    size_t sample_count = 2;
};

inline void validate_category_set(const KnowledgeCategorySet& set) {
    if (set.categories.empty()) throw ConfigInvalid("knowledge category set is empty");
    if (set.sample_count < 1 || set.sample_count > set.categories.size())
        throw ConfigInvalid("category sample_count must be in [1, categories]");
    std::set<std::string> distinct(set.categories.begin(), set.categories.end());
    if (distinct.size() != set.categories.size())
        throw ConfigInvalid("knowledge categories must be distinct");
}

/// sample_count distinct labels, uniform without replacement, deterministic
/// for a given seed.
inline std::vector<std::string> sample_knowledge_categories(const KnowledgeCategorySet& set,
                                                            uint64_t rng_seed) {
    validate_category_set(set);
    auto idx = sample_indices(set.categories.size(), set.sample_count, rng_seed);
    std::vector<std::string> out;
    out.reserve(idx.size());
    for (size_t i : idx) out.push_back(set.categories[i]);
    return out;
}

// ---------------------------------------------------------------------------
// PromptBuilder: binds annotations and records into the template set.

struct TemplateSet {
    std::map<PromptFamily, PromptTemplate> templates;

    const PromptTemplate& get(PromptFamily family) const { return templates.at(family); }

    static TemplateSet defaults() {
        TemplateSet set;
        for (PromptFamily f : kAllPromptFamilies) set.templates.emplace(f, default_template(f));
        return set;
    }
};

class PromptBuilder {
public:
    PromptBuilder(TemplateSet templates, int cross_modal_count)
        : templates_(std::move(templates)), cross_modal_count_(cross_modal_count) {}

    const PromptTemplate& tmpl(PromptFamily family) const { return templates_.get(family); }

    std::string cross_modal(const AnnotatedImage& image) const {
        if (image.captions.empty() || image.objects.empty())
            throw EmptyAnnotations("image '" + image.image_id +
                                   "' needs at least one caption and one object");
        return render(tmpl(PromptFamily::cross_modal_synthesis),
                      {{"count", std::to_string(cross_modal_count_)},
                       {"captions", caption_block(image)},
                       {"objects", object_list(image)}});
    }

    std::string outside_knowledge(const AnnotatedImage& image, const ObjectAnnotation& topic,
                                  const std::vector<std::string>& categories) const {
        bool in_image = false;
        for (const auto& obj : image.objects)
            if (obj.name == topic.name) in_image = true;
        if (!in_image)
            throw TopicNotInImage("topic '" + topic.name + "' is not an object of image '" +
                                  image.image_id + "'");
        std::string cats;
        for (size_t i = 0; i < categories.size(); ++i) {
            if (i) cats += ", ";
            cats += categories[i];
        }
        return render(tmpl(PromptFamily::outside_knowledge_synthesis),
                      {{"captions", caption_block(image)},
                       {"topic_entity", topic.name},
                       {"topic_caption", topic.region_caption.value_or(topic.raw_name)},
                       {"categories", cats}});
    }

    std::string complication(const InstructionRecord& record, const AnnotatedImage& image) const {
        require_open_ended(record, "complication");
        return render(tmpl(PromptFamily::complication), {{"instruction", record.instruction},
                                                         {"response", record.response},
                                                         {"captions", caption_block(image)},
                                                         {"objects", object_list(image)}});
    }

    std::string verification(const InstructionRecord& record, const AnnotatedImage& image) const {
        return render(tmpl(PromptFamily::verification), {{"instruction", record.instruction},
                                                         {"response", record.response},
                                                         {"captions", caption_block(image)},
                                                         {"objects", object_list(image)}});
    }

    std::string reformulate_bool(const InstructionRecord& record) const {
        require_open_ended(record, "bool reformulation");
        return render(tmpl(PromptFamily::reformulate_bool),
                      {{"instruction", record.instruction}, {"response", record.response}});
    }

    std::string reformulate_multichoice(const InstructionRecord& record) const {
        require_open_ended(record, "multi-choice reformulation");
        return render(tmpl(PromptFamily::reformulate_multichoice),
                      {{"instruction", record.instruction}, {"response", record.response}});
    }

    std::map<std::string, std::string> fingerprints() const {
        std::map<std::string, std::string> out;
        for (const auto& [family, tmpl] : templates_.templates)
            out[to_string(family)] = tmpl.fingerprint();
        return out;
    }

private:
    static void require_open_ended(const InstructionRecord& record, const std::string& what) {
        if (record.format != RecordFormat::open_ended)
            throw WrongFormat(what + " requires an open_ended record, got " +
                              to_string(record.format));
    }

    static std::string caption_block(const AnnotatedImage& image) {
        std::string out;
        for (const auto& cap : image.captions) {
            out += "- ";
            out += cap;
            out += '\n';
        }
        if (!out.empty()) out.pop_back();
        return out;
    }

    static std::string object_list(const AnnotatedImage& image) {
        std::string out;
        for (size_t i = 0; i < image.objects.size(); ++i) {
            if (i) out += ", ";
            out += image.objects[i].name;
        }
        return out;
    }

    TemplateSet templates_;
    int cross_modal_count_;
};

}  // namespace comvint
