#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "comvint/selection.hpp"
#include "support/test_support.hpp"

using namespace comvint;
using test_support::make_corpus;
using test_support::make_image;

namespace {

// Brute-force topic-entity oracle: document frequencies by direct corpus
// scan, argmin with the documented tie-breaking. Independent of
// CorpusStats and select_topic_entity.
const ObjectAnnotation& oracle_topic_entity(const AnnotatedImage& image, const Corpus& corpus) {
    REQUIRE(!image.objects.empty());
    const ObjectAnnotation* best = nullptr;
    size_t best_df = 0;
    std::string best_name;
    for (const auto& obj : image.objects) {
        std::string name = normalize_object_name(obj.name);
        size_t df = 0;
        for (const auto& other : corpus.images) {
            bool contains = false;
            for (const auto& o : other.objects)
                if (normalize_object_name(o.name) == name) contains = true;
            if (contains) ++df;
        }
        if (!best || df < best_df || (df == best_df && name < best_name)) {
            best = &obj;
            best_df = df;
            best_name = name;
        }
    }
    return *best;
}

Corpus random_corpus(uint64_t seed, size_t max_images = 20, size_t name_pool = 10) {
    std::mt19937_64 rng(seed);
    const std::vector<std::string> pool = {"dog",  "frisbee", "car",   "violin", "tree",
                                           "kite", "bench",   "pond",  "lamp",   "bicycle"};
    Corpus corpus;
    size_t n_images = 1 + rng_below(rng, max_images);
    for (size_t i = 0; i < n_images; ++i) {
        size_t n_objects = 1 + rng_below(rng, std::min<size_t>(name_pool, 6));
        std::set<std::string> chosen;
        while (chosen.size() < n_objects) chosen.insert(pool[rng_below(rng, name_pool)]);
        corpus.images.push_back(make_image("img" + std::to_string(i), {"a scene"},
                                           std::vector<std::string>(chosen.begin(), chosen.end())));
    }
    return corpus;
}

Corpus three_image_corpus() {
    return make_corpus({make_image("a", {"x"}, {"dog", "frisbee"}),
                        make_image("b", {"x"}, {"dog", "car"}),
                        make_image("c", {"x"}, {"dog", "violin"})});
}

}  // namespace

TEST_CASE("caption richness counts unicode scalars", "[selection]") {
    CHECK(caption_richness(make_image("i", {"abc", "de"}, {})) == 5);
    AnnotatedImage empty_caption = make_image("i", {"x"}, {});
    empty_caption.captions = {""};
    CHECK(caption_richness(empty_caption) == 0);
    CHECK(caption_richness(make_image("i", {"héllo"}, {})) == 5);  // scalars, not bytes
    CHECK(caption_richness(make_image("i", {"a b"}, {})) == 3);    // whitespace included
}

TEST_CASE("caption richness filter boundary is inclusive", "[selection]") {
    auto img_at = [](size_t chars) {
        return make_image("r" + std::to_string(chars), {std::string(chars, 'x')}, {});
    };
    Corpus corpus = make_corpus({img_at(699), img_at(700), img_at(701)});
    auto [kept, report] = filter_by_caption_richness(corpus, 700);
    REQUIRE(kept.images.size() == 2);
    CHECK(kept.images[0].image_id == "r700");
    CHECK(kept.images[1].image_id == "r701");
    CHECK(report.input_count == 3);
    CHECK(report.retained_count == 2);
    CHECK(report.rejected_count == 1);
    CHECK(report.retained_count + report.rejected_count == report.input_count);
}

TEST_CASE("richness filter with zero threshold is the identity", "[selection]") {
    Corpus corpus = three_image_corpus();
    auto [kept, report] = filter_by_caption_richness(corpus, 0);
    CHECK(kept.images == corpus.images);
    CHECK(report.rejected_count == 0);
}

TEST_CASE("object count filter excludes only strictly-more", "[selection]") {
    auto img_with = [](size_t n) {
        std::vector<std::string> names;
        for (size_t i = 0; i < n; ++i) names.push_back("obj" + std::to_string(i));
        return make_image("o" + std::to_string(n), {"x"}, names);
    };
    Corpus corpus = make_corpus({img_with(6), img_with(7), img_with(8), img_with(0)});
    auto [kept, report] = filter_by_object_count(corpus, 7);
    REQUIRE(kept.images.size() == 3);
    CHECK(kept.images[0].image_id == "o6");
    CHECK(kept.images[1].image_id == "o7");  // equality is retained
    CHECK(kept.images[2].image_id == "o0");
    CHECK(report.rejected_count == 1);
}

TEST_CASE("corpus stats: document frequency", "[selection]") {
    CorpusStats stats = compute_corpus_stats(three_image_corpus());
    CHECK(stats.total_images == 3);
    CHECK(stats.document_frequency.at("dog") == 3);
    CHECK(stats.document_frequency.at("frisbee") == 1);
    CHECK(stats.document_frequency.at("car") == 1);
    CHECK(stats.document_frequency.at("violin") == 1);
}

TEST_CASE("corpus stats: per-image dedup after normalization", "[selection]") {
    Corpus corpus = make_corpus({make_image("a", {"x"}, {"Dog", "dog"})});
    CorpusStats stats = compute_corpus_stats(corpus);
    CHECK(stats.document_frequency.at("dog") == 1);
}

TEST_CASE("corpus stats: empty corpus", "[selection]") {
    CorpusStats stats = compute_corpus_stats(Corpus{});
    CHECK(stats.total_images == 0);
    CHECK(stats.document_frequency.empty());
}

TEST_CASE("idf values and unknown names", "[selection]") {
    CorpusStats stats = compute_corpus_stats(three_image_corpus());
    CHECK_THAT(idf("frisbee", stats), Catch::Matchers::WithinAbs(std::log(3.0), 1e-12));
    CHECK(idf("dog", stats) == 0.0);
    CHECK_THROWS_AS(idf("unicorn", stats), UnknownName);
}

TEST_CASE("idf is antitone in document frequency", "[selection]") {
    Corpus corpus = random_corpus(7);
    CorpusStats stats = compute_corpus_stats(corpus);
    for (const auto& [a, dfa] : stats.document_frequency)
        for (const auto& [b, dfb] : stats.document_frequency)
            if (dfa < dfb) CHECK(idf(a, stats) > idf(b, stats));
}

TEST_CASE("topic entity: long-tail object wins", "[selection]") {
    Corpus corpus = three_image_corpus();
    CorpusStats stats = compute_corpus_stats(corpus);
    const auto& topic = select_topic_entity(corpus.images[0], stats);
    CHECK(topic.name == oracle_topic_entity(corpus.images[0], corpus).name);
    CHECK(topic.name == "frisbee");
}

TEST_CASE("topic entity: lexicographic tie-break", "[selection]") {
    Corpus corpus = make_corpus({make_image("a", {"x"}, {"violin", "car"})});
    CorpusStats stats = compute_corpus_stats(corpus);
    CHECK(select_topic_entity(corpus.images[0], stats).name == "car");
}

TEST_CASE("topic entity: single object and no objects", "[selection]") {
    Corpus corpus = make_corpus({make_image("a", {"x"}, {"kite"}), make_image("b", {"x"}, {})});
    CorpusStats stats = compute_corpus_stats(corpus);
    CHECK(select_topic_entity(corpus.images[0], stats).name == "kite");
    CHECK_THROWS_AS(select_topic_entity(corpus.images[1], stats), NoObjects);
}

TEST_CASE("topic entity agrees with the brute-force oracle", "[selection]") {
    for (uint64_t seed = 1; seed <= 30; ++seed) {
        Corpus corpus = random_corpus(seed);
        CorpusStats stats = compute_corpus_stats(corpus);
        for (const auto& image : corpus.images) {
            CHECK(select_topic_entity(image, stats).name ==
                  oracle_topic_entity(image, corpus).name);
        }
    }
}

TEST_CASE("filters are idempotent and commute", "[selection]") {
    for (uint64_t seed = 40; seed < 48; ++seed) {
        Corpus corpus = random_corpus(seed);
        // vary caption sizes so the richness filter can discriminate
        for (size_t i = 0; i < corpus.images.size(); ++i)
            corpus.images[i].captions = {std::string(3 + 2 * i, 'c')};

        auto once = filter_by_caption_richness(corpus, 7).first;
        auto twice = filter_by_caption_richness(once, 7).first;
        CHECK(once.images == twice.images);

        auto obj_once = filter_by_object_count(corpus, 3).first;
        auto obj_twice = filter_by_object_count(obj_once, 3).first;
        CHECK(obj_once.images == obj_twice.images);

        auto a = filter_by_object_count(filter_by_caption_richness(corpus, 7).first, 3).first;
        auto b = filter_by_caption_richness(filter_by_object_count(corpus, 3).first, 7).first;
        CHECK(a.images == b.images);
    }
}
