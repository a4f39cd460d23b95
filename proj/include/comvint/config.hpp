#pragma once

// PipelineConfig: every threshold, round limit, fraction, decoding
// parameter and seed in one place. Missing keys take the documented
// defaults; every effective value is echoed into the run manifest.

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/llm_client.hpp"
#include "comvint/prompts.hpp"

namespace comvint {

struct CorpusInput {
    std::string path;
    std::string format = "canonical";  // canonical | flickr30k_entities | visual_genome
};

struct ReformulationConfig {
    double bool_fraction = 0.25;
    double multi_choice_fraction = 0.25;
    bool keep_sources = false;  // replace sampled sources by default
};

struct MixConfig {
    int cross_modal = 12;
    int outside_knowledge = 20;
    int total = 0;  // 0 disables mixing
};

struct PipelineConfig {
    size_t caption_char_min = 700;
    size_t object_count_max = 7;
    int complication_rounds = 2;
    int cross_modal_per_image = 3;
    int outside_knowledge_per_image = 1;
    ReformulationConfig reformulation;
    MixConfig mix;
    int concurrency_limit = 1;
    RetryPolicy retry;
    RateLimit rate_limit{0, 0};  // capacity 0 disables the limiter
    uint64_t seed = 1;
    std::map<std::string, std::string> stage_models = {
        {"synthesis", "gpt-4"},
        {"complication", "gpt-4"},
        {"verification", "gpt-3.5-turbo"},
        {"reformulation", "gpt-3.5-turbo"},
    };
    std::map<std::string, double> stage_temperatures = {
        {"synthesis", 1.0},
        {"complication", 1.0},
        {"verification", 0.0},
        {"reformulation", 0.0},
    };
    int max_tokens = 1024;
    PriceTable price_table = {
        {"gpt-4", {0.03, 0.06}},
        {"gpt-3.5-turbo", {0.0015, 0.002}},
    };
    std::string base_url = "https://api.openai.com/v1";
    std::map<std::string, std::string> template_paths;  // family name -> file
    std::vector<std::string> knowledge_categories = default_knowledge_categories();
    size_t category_sample_count = 2;
    std::optional<CorpusInput> cross_modal_corpus;
    std::optional<CorpusInput> outside_knowledge_corpus;
};

namespace detail {

template <typename T>
void read_key(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigInvalid(std::string("config key '") + key + "' has the wrong type");
    }
}

inline CorpusInput read_corpus_input(const json& j, const std::string& where) {
    CorpusInput in;
    if (!j.contains("path") || !j["path"].is_string())
        throw ConfigInvalid("config key '" + where + ".path' is required");
    in.path = j["path"].get<std::string>();
    if (j.contains("format")) in.format = j["format"].get<std::string>();
    if (in.format != "canonical" && in.format != "flickr30k_entities" &&
        in.format != "visual_genome")
        throw ConfigInvalid("config key '" + where + ".format' must be canonical, "
                            "flickr30k_entities or visual_genome");
    return in;
}

}  // namespace detail

inline void validate_config(const PipelineConfig& c) {
    if (c.complication_rounds < 0) throw ConfigInvalid("complication_rounds must be >= 0");
    if (c.cross_modal_per_image < 1) throw ConfigInvalid("cross_modal_per_image must be >= 1");
    if (c.outside_knowledge_per_image < 1)
        throw ConfigInvalid("outside_knowledge_per_image must be >= 1");
    if (c.reformulation.bool_fraction < 0 || c.reformulation.multi_choice_fraction < 0)
        throw ConfigInvalid("reformulation fractions must be >= 0");
    if (c.reformulation.bool_fraction + c.reformulation.multi_choice_fraction > 1.0)
        throw ConfigInvalid("reformulation fractions must sum to <= 1");
    if (c.mix.total < 0) throw ConfigInvalid("mix.total must be >= 0");
    if (c.mix.total > 0 && (c.mix.cross_modal <= 0 || c.mix.outside_knowledge <= 0))
        throw ConfigInvalid("mix targets must be positive when mixing is enabled");
    if (c.concurrency_limit < 1) throw ConfigInvalid("concurrency_limit must be >= 1");
    if (c.retry.max_attempts < 1) throw ConfigInvalid("retry.max_attempts must be >= 1");
    if (c.max_tokens < 1) throw ConfigInvalid("max_tokens must be >= 1");
    if (c.category_sample_count < 1 || c.category_sample_count > c.knowledge_categories.size())
        throw ConfigInvalid("category_sample_count must be in [1, knowledge_categories]");
    for (const char* stage : {"synthesis", "complication", "verification", "reformulation"}) {
        if (!c.stage_models.count(stage))
            throw ConfigInvalid(std::string("models.") + stage + " is required");
        if (!c.stage_temperatures.count(stage))
            throw ConfigInvalid(std::string("temperatures.") + stage + " is required");
        double t = c.stage_temperatures.at(stage);
        if (t < 0.0 || t > 2.0)
            throw ConfigInvalid(std::string("temperatures.") + stage + " must be in [0, 2]");
    }
    for (const auto& [family, path] : c.template_paths) {
        bool known = false;
        for (PromptFamily f : kAllPromptFamilies)
            if (to_string(f) == family) known = true;
        if (!known) throw ConfigInvalid("templates." + family + " is not a prompt family");
        (void)path;
    }
}

inline PipelineConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigInvalid("config root must be a JSON object");
    PipelineConfig c;
    detail::read_key(j, "caption_char_min", c.caption_char_min);
    detail::read_key(j, "object_count_max", c.object_count_max);
    if (j.contains("complication_rounds")) {
        if (!j["complication_rounds"].is_number_integer() ||
            j["complication_rounds"].get<long long>() < 0)
            throw ConfigInvalid("complication_rounds must be a non-negative integer");
        c.complication_rounds = j["complication_rounds"].get<int>();
    }
    detail::read_key(j, "cross_modal_per_image", c.cross_modal_per_image);
    detail::read_key(j, "outside_knowledge_per_image", c.outside_knowledge_per_image);
    if (j.contains("reformulation")) {
        const auto& r = j["reformulation"];
        detail::read_key(r, "bool_fraction", c.reformulation.bool_fraction);
        detail::read_key(r, "multi_choice_fraction", c.reformulation.multi_choice_fraction);
        detail::read_key(r, "keep_sources", c.reformulation.keep_sources);
    }
    if (j.contains("mix")) {
        const auto& m = j["mix"];
        detail::read_key(m, "cross_modal", c.mix.cross_modal);
        detail::read_key(m, "outside_knowledge", c.mix.outside_knowledge);
        detail::read_key(m, "total", c.mix.total);
    }
    detail::read_key(j, "concurrency_limit", c.concurrency_limit);
    if (j.contains("retry")) {
        const auto& r = j["retry"];
        detail::read_key(r, "max_attempts", c.retry.max_attempts);
        long long base_ms = c.retry.base_delay.count();
        detail::read_key(r, "base_delay_ms", base_ms);
        c.retry.base_delay = std::chrono::milliseconds(base_ms);
        detail::read_key(r, "multiplier", c.retry.multiplier);
        detail::read_key(r, "jitter_seed", c.retry.jitter_seed);
    }
    if (j.contains("rate_limit")) {
        const auto& r = j["rate_limit"];
        detail::read_key(r, "capacity", c.rate_limit.capacity);
        detail::read_key(r, "refill_per_second", c.rate_limit.refill_per_second);
    }
    detail::read_key(j, "seed", c.seed);
    if (j.contains("models"))
        for (auto it = j["models"].begin(); it != j["models"].end(); ++it)
            c.stage_models[it.key()] = it.value().get<std::string>();
    if (j.contains("temperatures"))
        for (auto it = j["temperatures"].begin(); it != j["temperatures"].end(); ++it)
            c.stage_temperatures[it.key()] = it.value().get<double>();
    detail::read_key(j, "max_tokens", c.max_tokens);
    if (j.contains("price_table")) {
        c.price_table.clear();
        for (auto it = j["price_table"].begin(); it != j["price_table"].end(); ++it)
            c.price_table[it.key()] = ModelPrice{it.value().value("prompt_per_1k", 0.0),
                                                 it.value().value("completion_per_1k", 0.0)};
    }
    detail::read_key(j, "base_url", c.base_url);
    if (j.contains("templates"))
        for (auto it = j["templates"].begin(); it != j["templates"].end(); ++it)
            c.template_paths[it.key()] = it.value().get<std::string>();
    if (j.contains("knowledge_categories"))
        c.knowledge_categories = j["knowledge_categories"].get<std::vector<std::string>>();
    detail::read_key(j, "category_sample_count", c.category_sample_count);
    if (j.contains("corpus")) {
        const auto& corpora = j["corpus"];
        if (corpora.contains("cross_modal"))
            c.cross_modal_corpus = detail::read_corpus_input(corpora["cross_modal"], "corpus.cross_modal");
        if (corpora.contains("outside_knowledge"))
            c.outside_knowledge_corpus =
                detail::read_corpus_input(corpora["outside_knowledge"], "corpus.outside_knowledge");
    }
    validate_config(c);
    return c;
}

/// Loads a config file; an empty file means all defaults.
inline PipelineConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    if (trim(text).empty()) return PipelineConfig{};
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigInvalid("config file is not valid JSON: " + path.string());
    return config_from_json(j);
}

/// The effective configuration, defaults included, as echoed into the
/// run manifest.
inline json config_to_json(const PipelineConfig& c) {
    json j;
    j["caption_char_min"] = c.caption_char_min;
    j["object_count_max"] = c.object_count_max;
    j["complication_rounds"] = c.complication_rounds;
    j["cross_modal_per_image"] = c.cross_modal_per_image;
    j["outside_knowledge_per_image"] = c.outside_knowledge_per_image;
    j["reformulation"] = {{"bool_fraction", c.reformulation.bool_fraction},
                          {"multi_choice_fraction", c.reformulation.multi_choice_fraction},
                          {"keep_sources", c.reformulation.keep_sources}};
    j["mix"] = {{"cross_modal", c.mix.cross_modal},
                {"outside_knowledge", c.mix.outside_knowledge},
                {"total", c.mix.total}};
    j["concurrency_limit"] = c.concurrency_limit;
    j["retry"] = {{"max_attempts", c.retry.max_attempts},
                  {"base_delay_ms", c.retry.base_delay.count()},
                  {"multiplier", c.retry.multiplier},
                  {"jitter_seed", c.retry.jitter_seed}};
    j["rate_limit"] = {{"capacity", c.rate_limit.capacity},
                       {"refill_per_second", c.rate_limit.refill_per_second}};
    j["seed"] = c.seed;
    j["models"] = c.stage_models;
    j["temperatures"] = c.stage_temperatures;
    j["max_tokens"] = c.max_tokens;
    json prices = json::object();
    for (const auto& [model, p] : c.price_table)
        prices[model] = {{"prompt_per_1k", p.prompt_per_1k}, {"completion_per_1k", p.completion_per_1k}};
    j["price_table"] = prices;
    j["base_url"] = c.base_url;
    j["templates"] = c.template_paths;
    j["knowledge_categories"] = c.knowledge_categories;
    j["category_sample_count"] = c.category_sample_count;
    json corpora = json::object();
    if (c.cross_modal_corpus)
        corpora["cross_modal"] = {{"path", c.cross_modal_corpus->path},
                                  {"format", c.cross_modal_corpus->format}};
    if (c.outside_knowledge_corpus)
        corpora["outside_knowledge"] = {{"path", c.outside_knowledge_corpus->path},
                                        {"format", c.outside_knowledge_corpus->format}};
    j["corpus"] = corpora;
    return j;
}

/// Resolves template overrides against the defaults.
inline TemplateSet load_templates(const PipelineConfig& c) {
    TemplateSet set = TemplateSet::defaults();
    for (const auto& [family_name, path] : c.template_paths)
        for (PromptFamily f : kAllPromptFamilies)
            if (to_string(f) == family_name)
                set.templates.insert_or_assign(f, load_template_file(f, path));
    return set;
}

}  // namespace comvint
