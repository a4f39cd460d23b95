#pragma once

// Image-selection filters (caption richness, object count) and the
// document-frequency statistics behind topic-entity selection.

#include <cmath>
#include <map>
#include <string>

#include "comvint/annotations.hpp"
#include "comvint/errors.hpp"

namespace comvint {

struct CorpusStats {
    size_t total_images = 0;
    std::map<std::string, size_t> document_frequency;  // normalized name -> #images containing it
};

enum class SelectionRule { caption_richness_min, object_count_max };

inline std::string to_string(SelectionRule r) {
    return r == SelectionRule::caption_richness_min ? "caption_richness_min" : "object_count_max";
}

struct SelectionReport {
    size_t input_count = 0;
    size_t retained_count = 0;
    size_t rejected_count = 0;
    size_t threshold_used = 0;
    SelectionRule rule = SelectionRule::caption_richness_min;
};

inline json selection_report_to_json(const SelectionReport& r) {
    return json{{"input_count", r.input_count},
                {"retained_count", r.retained_count},
                {"rejected_count", r.rejected_count},
                {"threshold_used", r.threshold_used},
                {"rule", to_string(r.rule)}};
}

/// Total Unicode scalar count over all captions, whitespace included.
inline size_t caption_richness(const AnnotatedImage& image) {
    size_t total = 0;
    for (const auto& c : image.captions) total += utf8_scalar_count(c);
    return total;
}

/// Keeps images with caption_richness >= min_chars (boundary inclusive).
inline std::pair<Corpus, SelectionReport> filter_by_caption_richness(const Corpus& corpus,
                                                                     size_t min_chars) {
    Corpus out;
    out.source_label = corpus.source_label;
    out.created_at = corpus.created_at;
    SelectionReport report;
    report.rule = SelectionRule::caption_richness_min;
    report.threshold_used = min_chars;
    report.input_count = corpus.images.size();
    for (const auto& img : corpus.images)
        if (caption_richness(img) >= min_chars) out.images.push_back(img);
    report.retained_count = out.images.size();
    report.rejected_count = report.input_count - report.retained_count;
    return {std::move(out), report};
}

/// Keeps images with object count <= max_objects ("more than" rejects).
inline std::pair<Corpus, SelectionReport> filter_by_object_count(const Corpus& corpus,
                                                                 size_t max_objects) {
    Corpus out;
    out.source_label = corpus.source_label;
    out.created_at = corpus.created_at;
    SelectionReport report;
    report.rule = SelectionRule::object_count_max;
    report.threshold_used = max_objects;
    report.input_count = corpus.images.size();
    for (const auto& img : corpus.images)
        if (img.objects.size() <= max_objects) out.images.push_back(img);
    report.retained_count = out.images.size();
    report.rejected_count = report.input_count - report.retained_count;
    return {std::move(out), report};
}

/// Document frequency over the corpus: for each normalized object name,
/// the number of distinct images whose object set contains it.
inline CorpusStats compute_corpus_stats(const Corpus& corpus) {
    CorpusStats stats;
    stats.total_images = corpus.images.size();
    for (const auto& img : corpus.images) {
        std::set<std::string> names;
        for (const auto& obj : img.objects) names.insert(normalize_object_name(obj.name));
        for (const auto& name : names) ++stats.document_frequency[name];
    }
    return stats;
}

/// ln(N / df). No smoothing; the name must be present in the stats.
inline double idf(const std::string& name, const CorpusStats& stats) {
    auto it = stats.document_frequency.find(normalize_object_name(name));
    if (it == stats.document_frequency.end())
        throw UnknownName("name '" + name + "' not present in corpus stats");
    return std::log(static_cast<double>(stats.total_images) / static_cast<double>(it->second));
}

/// The most long-tail object of the image: minimal document frequency,
/// ties broken by lexicographically smallest normalized name, then first
/// occurrence.
inline const ObjectAnnotation& select_topic_entity(const AnnotatedImage& image,
                                                   const CorpusStats& stats) {
    if (image.objects.empty())
        throw NoObjects("image '" + image.image_id + "' has no objects");
    const ObjectAnnotation* best = nullptr;
    size_t best_df = 0;
    std::string best_name;
    for (const auto& obj : image.objects) {
        std::string name = normalize_object_name(obj.name);
        auto it = stats.document_frequency.find(name);
        if (it == stats.document_frequency.end())
            throw UnknownName("object '" + name + "' not present in corpus stats");
        if (!best || it->second < best_df || (it->second == best_df && name < best_name)) {
            best = &obj;
            best_df = it->second;
            best_name = name;
        }
    }
    return *best;
}

}  // namespace comvint
