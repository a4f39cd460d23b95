#pragma once

// Annotated-image corpora: the unified model for caption + object
// annotations, the Flickr30k-Entities bracket-markup parser, a simplified
// Visual-Genome-style reader, and the canonical newline-delimited corpus
// format used by every other stage.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "comvint/errors.hpp"
#include "comvint/util.hpp"

namespace comvint {

using json = nlohmann::json;

struct BoundingBox {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;

    bool operator==(const BoundingBox&) const = default;
};

struct ObjectAnnotation {
    std::optional<std::string> entity_id;
    std::string name;      // normalized: lowercase, single-spaced
    std::string raw_name;  // original surface text
    std::optional<std::string> category;
    std::optional<std::string> region_caption;
    std::optional<BoundingBox> bbox;

    bool operator==(const ObjectAnnotation&) const = default;
};

enum class CorpusSource { flickr30k_entities, visual_genome, custom };

inline std::string to_string(CorpusSource s) {
    switch (s) {
        case CorpusSource::flickr30k_entities: return "flickr30k_entities";
        case CorpusSource::visual_genome: return "visual_genome";
        case CorpusSource::custom: return "custom";
    }
    return "custom";
}

inline CorpusSource corpus_source_from_string(const std::string& s) {
    if (s == "flickr30k_entities") return CorpusSource::flickr30k_entities;
    if (s == "visual_genome") return CorpusSource::visual_genome;
    if (s == "custom") return CorpusSource::custom;
    throw SchemaViolation("unknown corpus source '" + s + "'", 0);
}

struct AnnotatedImage {
    std::string image_id;
    CorpusSource source = CorpusSource::custom;
    std::vector<std::string> captions;
    std::vector<ObjectAnnotation> objects;

    bool operator==(const AnnotatedImage&) const = default;
};

struct Corpus {
    std::vector<AnnotatedImage> images;
    std::string source_label;
    std::string created_at;  // ISO-8601; not persisted in the record stream
};

/// Lowercase, trim, collapse internal whitespace. No lemmatization and no
/// article stripping: "Dogs" stays "dogs", never "dog".
inline std::string normalize_object_name(std::string_view raw) {
    return collapse_whitespace(to_lower_ascii(raw));
}

struct EntityMention {
    std::string entity_id;
    std::string category;
    std::string phrase;

    bool operator==(const EntityMention&) const = default;
};

struct ParsedSentence {
    std::string plain_caption;
    std::vector<EntityMention> entities;
};

/// Parses one Flickr30k-Entities sentence. Grammar:
///   '[' '/EN#' digits ('/' type-token)+ ' ' phrase ']'
/// Multiple type tokens are joined with '/'; the phrase may not contain
/// brackets. Throws MalformedMarkup on unbalanced brackets, a missing '#',
/// or an empty phrase.
inline ParsedSentence parse_entity_markup(std::string_view sentence) {
    ParsedSentence out;
    std::string& plain = out.plain_caption;
    size_t i = 0;
    const size_t n = sentence.size();
    while (i < n) {
        char c = sentence[i];
        if (c == ']') throw MalformedMarkup("unbalanced ']' at byte " + std::to_string(i));
        if (c != '[') {
            plain.push_back(c);
            ++i;
            continue;
        }
        size_t close = sentence.find(']', i);
        if (close == std::string_view::npos)
            throw MalformedMarkup("unbalanced '[' at byte " + std::to_string(i));
        std::string_view span = sentence.substr(i + 1, close - i - 1);
        if (span.find('[') != std::string_view::npos)
            throw MalformedMarkup("nested '[' at byte " + std::to_string(i));
        if (span.substr(0, 4) != "/EN#")
            throw MalformedMarkup("entity span must start with /EN# at byte " + std::to_string(i));
        size_t p = 4;
        size_t id_start = p;
        while (p < span.size() && std::isdigit(static_cast<unsigned char>(span[p]))) ++p;
        if (p == id_start) throw MalformedMarkup("missing entity id digits at byte " + std::to_string(i));
        EntityMention ent;
        ent.entity_id = std::string(span.substr(id_start, p - id_start));
        if (p >= span.size() || span[p] != '/')
            throw MalformedMarkup("missing type token at byte " + std::to_string(i));
        // one or more '/'-separated type tokens, terminated by the first space
        size_t types_start = p + 1;
        size_t space = span.find(' ', types_start);
        if (space == std::string_view::npos || space == types_start)
            throw MalformedMarkup("missing phrase at byte " + std::to_string(i));
        ent.category = std::string(span.substr(types_start, space - types_start));
        if (ent.category.empty() || ent.category.front() == '/' || ent.category.back() == '/')
            throw MalformedMarkup("empty type token at byte " + std::to_string(i));
        ent.phrase = std::string(span.substr(space + 1));
        if (ent.phrase.empty()) throw MalformedMarkup("empty phrase at byte " + std::to_string(i));
        plain += ent.phrase;
        out.entities.push_back(std::move(ent));
        i = close + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical corpus format: newline-delimited JSON, one image per line,
// fields image_id / source / captions / objects. UTF-8 throughout.

inline json object_to_json(const ObjectAnnotation& obj) {
    json j;
    if (obj.entity_id) j["entity_id"] = *obj.entity_id;
    j["name"] = obj.name;
    j["raw_name"] = obj.raw_name;
    if (obj.category) j["category"] = *obj.category;
    if (obj.region_caption) j["region_caption"] = *obj.region_caption;
    if (obj.bbox) j["bbox"] = {obj.bbox->x, obj.bbox->y, obj.bbox->width, obj.bbox->height};
    return j;
}

inline ObjectAnnotation object_from_json(const json& j, size_t line) {
    static const std::set<std::string> allowed = {"entity_id", "name",           "raw_name",
                                                  "category",  "region_caption", "bbox"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw SchemaViolation("unknown object field '" + it.key() + "'", line);
    ObjectAnnotation obj;
    if (!j.contains("name") || !j["name"].is_string())
        throw SchemaViolation("object missing 'name'", line);
    obj.name = j["name"].get<std::string>();
    if (obj.name.empty()) throw SchemaViolation("object 'name' is empty", line);
    obj.raw_name = j.value("raw_name", obj.name);
    if (j.contains("entity_id")) obj.entity_id = j["entity_id"].get<std::string>();
    if (j.contains("category")) obj.category = j["category"].get<std::string>();
    if (j.contains("region_caption")) obj.region_caption = j["region_caption"].get<std::string>();
    if (j.contains("bbox")) {
        const auto& b = j["bbox"];
        if (!b.is_array() || b.size() != 4) throw SchemaViolation("bbox must be [x,y,w,h]", line);
        BoundingBox box{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
        if (box.x < 0 || box.y < 0 || box.width <= 0 || box.height <= 0)
            throw SchemaViolation("bbox must satisfy x,y >= 0 and w,h > 0", line);
        obj.bbox = box;
    }
    return obj;
}

inline json image_to_json(const AnnotatedImage& img) {
    json j;
    j["image_id"] = img.image_id;
    j["source"] = to_string(img.source);
    j["captions"] = img.captions;
    json objs = json::array();
    for (const auto& o : img.objects) objs.push_back(object_to_json(o));
    j["objects"] = objs;
    return j;
}

inline AnnotatedImage image_from_json(const json& j, size_t line) {
    static const std::set<std::string> allowed = {"image_id", "source", "captions", "objects"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw SchemaViolation("unknown image field '" + it.key() + "'", line);
    AnnotatedImage img;
    if (!j.contains("image_id") || !j["image_id"].is_string() || j["image_id"].get<std::string>().empty())
        throw SchemaViolation("image missing non-empty 'image_id'", line);
    img.image_id = j["image_id"].get<std::string>();
    img.source = corpus_source_from_string(j.value("source", "custom"));
    if (!j.contains("captions") || !j["captions"].is_array() || j["captions"].empty())
        throw SchemaViolation("image needs at least one caption", line);
    for (const auto& c : j["captions"]) {
        std::string cap = c.get<std::string>();
        if (cap.empty()) throw SchemaViolation("empty caption", line);
        img.captions.push_back(std::move(cap));
    }
    if (j.contains("objects"))
        for (const auto& o : j["objects"]) img.objects.push_back(object_from_json(o, line));
    return img;
}

inline void check_unique_image_ids(const Corpus& corpus) {
    std::set<std::string> seen;
    for (const auto& img : corpus.images)
        if (!seen.insert(img.image_id).second)
            throw DuplicateImageId("duplicate image_id '" + img.image_id + "'");
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::string out;
    for (const auto& img : corpus.images) {
        out += image_to_json(img).dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline Corpus load_corpus(const std::filesystem::path& path) {
    Corpus corpus;
    corpus.source_label = path.filename().string();
    corpus.created_at = iso8601_now();
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON", line_no);
        corpus.images.push_back(image_from_json(j, line_no));
    }
    check_unique_image_ids(corpus);
    return corpus;
}

// ---------------------------------------------------------------------------
// Flickr30k-Entities ingest. Line format: image_id <TAB> annotated sentence.
// A directory is a set of *.txt files in that format; an image may not be
// declared by more than one file.

struct LoadReport {
    size_t images = 0;
    size_t malformed_lines = 0;
    std::vector<std::string> warnings;
};

namespace detail {

inline void append_entity_objects(AnnotatedImage& img, const std::vector<EntityMention>& entities,
                                  std::set<std::string>& seen_names) {
    for (const auto& ent : entities) {
        std::string name = normalize_object_name(ent.phrase);
        if (name.empty()) continue;
        if (!seen_names.insert(name).second) continue;  // dedup by normalized name
        ObjectAnnotation obj;
        obj.entity_id = ent.entity_id;
        obj.name = name;
        obj.raw_name = ent.phrase;
        obj.category = ent.category;
        img.objects.push_back(std::move(obj));
    }
}

inline void load_flickr_file(const std::filesystem::path& file, Corpus& corpus, LoadReport& report,
                             std::map<std::string, std::string>& owner_file,
                             std::map<std::string, size_t>& image_index,
                             std::map<std::string, std::set<std::string>>& seen_names) {
    std::string text;
    try {
        text = read_file(file);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) {
            ++report.malformed_lines;
            report.warnings.push_back(file.string() + ":" + std::to_string(line_no) +
                                      ": missing image_id<TAB>sentence");
            continue;
        }
        std::string image_id = line.substr(0, tab);
        std::string sentence = line.substr(tab + 1);
        auto owner = owner_file.find(image_id);
        if (owner != owner_file.end() && owner->second != file.string())
            throw DuplicateImageId("image_id '" + image_id + "' declared by both " + owner->second +
                                   " and " + file.string());
        owner_file[image_id] = file.string();

        ParsedSentence parsed;
        try {
            parsed = parse_entity_markup(sentence);
        } catch (const MalformedMarkup& e) {
            ++report.malformed_lines;
            report.warnings.push_back(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
            continue;
        }
        auto it = image_index.find(image_id);
        if (it == image_index.end()) {
            AnnotatedImage img;
            img.image_id = image_id;
            img.source = CorpusSource::flickr30k_entities;
            corpus.images.push_back(std::move(img));
            it = image_index.emplace(image_id, corpus.images.size() - 1).first;
        }
        AnnotatedImage& img = corpus.images[it->second];
        img.captions.push_back(parsed.plain_caption);
        append_entity_objects(img, parsed.entities, seen_names[image_id]);
    }
}

}  // namespace detail

inline std::pair<Corpus, LoadReport> load_flickr30k_entities(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    Corpus corpus;
    corpus.source_label = "flickr30k_entities";
    corpus.created_at = iso8601_now();
    LoadReport report;
    std::map<std::string, std::string> owner_file;
    std::map<std::string, size_t> image_index;
    std::map<std::string, std::set<std::string>> seen_names;

    std::error_code ec;
    if (fs::is_directory(path, ec)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.is_regular_file() && entry.path().extension() == ".txt")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            detail::load_flickr_file(f, corpus, report, owner_file, image_index, seen_names);
    } else {
        detail::load_flickr_file(path, corpus, report, owner_file, image_index, seen_names);
    }

    // images that lost every caption to malformed lines cannot satisfy the
    // model invariants; drop them with a warning
    std::vector<AnnotatedImage> kept;
    for (auto& img : corpus.images) {
        if (img.captions.empty()) {
            report.warnings.push_back("image '" + img.image_id + "' dropped: no valid captions");
            continue;
        }
        kept.push_back(std::move(img));
    }
    corpus.images = std::move(kept);
    report.images = corpus.images.size();
    check_unique_image_ids(corpus);
    return {std::move(corpus), std::move(report)};
}

// ---------------------------------------------------------------------------
// Simplified Visual-Genome ingest: newline-delimited JSON, one image per
// line: {"id": ..., "description"?: ..., "objects": [{"name", "caption"?,
// "bbox"?: [x,y,w,h]}]}. An object without a name aborts the load.

inline std::pair<Corpus, LoadReport> load_visual_genome(const std::filesystem::path& path) {
    Corpus corpus;
    corpus.source_label = "visual_genome";
    corpus.created_at = iso8601_now();
    LoadReport report;
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw IoFailure(e.what());
    }
    size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw SchemaViolation("invalid JSON", line_no);
        AnnotatedImage img;
        if (j.contains("id") && j["id"].is_number_integer())
            img.image_id = std::to_string(j["id"].get<long long>());
        else
            img.image_id = j.value("id", "");
        if (img.image_id.empty()) throw SchemaViolation("record missing 'id'", line_no);
        img.source = CorpusSource::visual_genome;
        std::set<std::string> seen_names;
        std::vector<std::string> region_captions;
        for (const auto& o : j.value("objects", json::array())) {
            if (!o.contains("name") || !o["name"].is_string() || o["name"].get<std::string>().empty())
                throw RecordMissingField("object without 'name' in record '" + img.image_id + "'");
            ObjectAnnotation obj;
            obj.raw_name = o["name"].get<std::string>();
            obj.name = normalize_object_name(obj.raw_name);
            if (o.contains("caption")) {
                obj.region_caption = o["caption"].get<std::string>();
                region_captions.push_back(*obj.region_caption);
            }
            if (o.contains("bbox")) {
                const auto& b = o["bbox"];
                if (!b.is_array() || b.size() != 4)
                    throw SchemaViolation("bbox must be [x,y,w,h]", line_no);
                obj.bbox = BoundingBox{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
            }
            if (!seen_names.insert(obj.name).second) continue;
            img.objects.push_back(std::move(obj));
        }
        if (j.contains("description") && !j["description"].get<std::string>().empty()) {
            img.captions.push_back(j["description"].get<std::string>());
        } else if (!region_captions.empty()) {
            std::string joined;
            for (size_t k = 0; k < region_captions.size(); ++k) {
                if (k) joined += ". ";
                joined += region_captions[k];
            }
            img.captions.push_back(joined);
        }
        if (img.captions.empty()) {
            report.warnings.push_back("image '" + img.image_id + "' dropped: no description or region captions");
            continue;
        }
        corpus.images.push_back(std::move(img));
    }
    report.images = corpus.images.size();
    check_unique_image_ids(corpus);
    return {std::move(corpus), std::move(report)};
}

}  // namespace comvint
