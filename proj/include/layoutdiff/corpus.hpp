#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/geometry.hpp"
#include "layoutdiff/layout_io.hpp"
#include "layoutdiff/rng.hpp"

namespace layoutdiff {

// Per-category box statistics: typical box aspect (w/h) and area fraction of
// the canvas, log-normally jittered at generation time. The spread of shapes
// is what makes size/aspect statistics worth learning.
struct CategoryPrior {
    std::string name;
    std::string plural;
    double aspect;  // mean w/h
    double area;    // mean area fraction
    bool surface;   // can host small objects in "N things on a B" scenes
};

inline const std::vector<CategoryPrior>& default_categories() {
    static const std::vector<CategoryPrior> cats = {
        {"person", "people", 0.45, 0.060, false},  {"man", "men", 0.45, 0.060, false},
        {"woman", "women", 0.45, 0.055, false},    {"dog", "dogs", 1.30, 0.040, false},
        {"cat", "cats", 1.20, 0.030, false},       {"bird", "birds", 1.10, 0.012, false},
        {"horse", "horses", 1.40, 0.080, false},   {"sheep", "sheep", 1.30, 0.050, false},
        {"elephant", "elephants", 1.50, 0.120, false}, {"car", "cars", 1.90, 0.070, false},
        {"bus", "buses", 2.20, 0.120, false},      {"boat", "boats", 2.00, 0.070, false},
        {"kite", "kites", 1.10, 0.020, false},     {"tree", "trees", 0.55, 0.100, false},
        {"table", "tables", 1.80, 0.100, true},    {"chair", "chairs", 0.70, 0.050, false},
        {"couch", "couches", 2.00, 0.100, true},   {"laptop", "laptops", 1.30, 0.025, false},
        {"cup", "cups", 0.75, 0.008, false},       {"bottle", "bottles", 0.40, 0.010, false},
    };
    return cats;
}

struct CorpusSpec {
    std::vector<std::string> categories;  // empty = all defaults
    long train_scenes = 50000;
    long val_scenes = 2000;
    int min_objects = 2;
    int max_objects = 8;
    std::uint64_t seed = 1;

    std::vector<CategoryPrior> resolve_categories() const {
        const auto& all = default_categories();
        if (categories.empty()) return all;
        std::vector<CategoryPrior> out;
        for (const auto& name : categories) {
            const auto it = std::find_if(all.begin(), all.end(),
                                         [&](const CategoryPrior& c) { return c.name == name; });
            if (it == all.end()) throw ConfigError("unknown corpus category '" + name + "'");
            out.push_back(*it);
        }
        if (out.size() < 4) throw ConfigError("corpus vocabulary needs at least 4 categories");
        return out;
    }
};

// All words the templated prompts can produce, plus the category phrases;
// this is the closed vocabulary the default embedding provider covers.
inline std::vector<std::string> corpus_vocabulary(const CorpusSpec& spec = {}) {
    std::vector<std::string> vocab;
    for (const auto& cat : spec.resolve_categories()) {
        vocab.push_back(cat.name);
        vocab.push_back(cat.plural);
    }
    for (const char* w : {"a", "an", "the", "to", "of", "on", "and", "with", "above", "below",
                          "left", "right", "one", "two", "three", "four", "five", "six", "seven",
                          "eight", "nine", "ten"}) {
        vocab.emplace_back(w);
    }
    std::sort(vocab.begin(), vocab.end());
    vocab.erase(std::unique(vocab.begin(), vocab.end()), vocab.end());
    return vocab;
}

namespace corpus_detail {

inline const char* count_word(int n) {
    static const char* words[] = {"zero", "one", "two",   "three", "four", "five",
                                  "six",  "seven", "eight", "nine",  "ten"};
    return words[n];
}

inline std::string article_for(const std::string& noun) {
    const char c = noun.empty() ? 'x' : noun[0];
    return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
}

inline std::string noun_phrase(const CategoryPrior& cat, int count) {
    if (count == 1) return article_for(cat.name) + " " + cat.name;
    return std::string(count_word(count)) + " " + cat.plural;
}

struct CanvasSize {
    double w, h;
};

inline const std::array<CanvasSize, 5>& canvas_sizes() {
    static const std::array<CanvasSize, 5> sizes = {
        CanvasSize{512, 512}, CanvasSize{640, 480}, CanvasSize{480, 640},
        CanvasSize{768, 432}, CanvasSize{432, 768}};
    return sizes;
}

// Sample a box of category-typical shape whose center can sit inside
// [cx_lo, cx_hi] x [cy_lo, cy_hi] canvas fractions.
inline BoundingBox sample_box(const CategoryPrior& cat, double w, double h, double cx_lo,
                              double cx_hi, double cy_lo, double cy_hi, Rng& rng) {
    const double area = cat.area * std::exp(0.4 * rng.gaussian()) * w * h;
    const double aspect = cat.aspect * std::exp(0.25 * rng.gaussian());
    double bw = std::sqrt(area * aspect);
    double bh = std::sqrt(area / aspect);
    bw = std::clamp(bw, 8.0, 0.42 * w);
    bh = std::clamp(bh, 8.0, 0.42 * h);
    const double half_wf = bw / (2.0 * w);
    const double half_hf = bh / (2.0 * h);
    const double cx = rng.uniform(std::max(cx_lo, half_wf), std::min(cx_hi, 1.0 - half_wf)) * w;
    const double cy = rng.uniform(std::max(cy_lo, half_hf), std::min(cy_hi, 1.0 - half_hf)) * h;
    return {cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0};
}

// Ordered category pairs reserved for the validation split, so held-out
// relation prompts are genuinely unseen combinations.
inline bool holdout_pair(int subject_idx, int object_idx) {
    return splitmix64(static_cast<std::uint64_t>(subject_idx) * 131u +
                      static_cast<std::uint64_t>(object_idx)) %
               10 ==
           0;
}

}  // namespace corpus_detail

// Deterministic scene synthesis. Three templates: a relation pair with
// optional extra objects, a counted group (optionally on a surface), and a
// plain enumeration. Every object in the layout is mentioned in the prompt
// with its exact count, so prompt, description set, and layout stay
// mutually consistent by construction.
class CorpusGenerator {
public:
    explicit CorpusGenerator(CorpusSpec spec) : spec_(std::move(spec)) {
        cats_ = spec_.resolve_categories();
        if (spec_.min_objects < 1 || spec_.max_objects < spec_.min_objects) {
            throw ConfigError("invalid objects-per-scene range");
        }
    }

    const CorpusSpec& spec() const { return spec_; }

    LayoutRecord make_scene(bool val_split, std::uint64_t index) const {
        Rng rng = Rng(spec_.seed).fork((val_split ? 0x8000000000000000ULL : 0) + index);
        const double kind = rng.uniform();
        if (kind < 0.55) return relation_scene(val_split, rng);
        if (kind < 0.90) return count_scene(rng);
        return plain_scene(rng);
    }

    std::vector<LayoutRecord> generate_split(bool val_split, long scenes) const {
        std::vector<LayoutRecord> out;
        out.reserve(static_cast<std::size_t>(scenes));
        for (long i = 0; i < scenes; ++i) {
            out.push_back(make_scene(val_split, static_cast<std::uint64_t>(i)));
        }
        return out;
    }

private:
    using CanvasSize = corpus_detail::CanvasSize;

    CanvasSize pick_canvas(Rng& rng) const {
        const auto& sizes = corpus_detail::canvas_sizes();
        return sizes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(sizes.size()) - 1))];
    }

    int pick_category(Rng& rng) const {
        return static_cast<int>(rng.uniform_int(0, static_cast<long>(cats_.size()) - 1));
    }

    LayoutRecord relation_scene(bool val_split, Rng& rng) const {
        const Relation rel = static_cast<Relation>(rng.uniform_int(0, 3));
        int subj = 0, obj = 0;
        do {
            subj = pick_category(rng);
            obj = pick_category(rng);
        } while (subj == obj || corpus_detail::holdout_pair(subj, obj) != val_split);
        const CanvasSize canvas = pick_canvas(rng);
        const CategoryPrior& a = cats_[static_cast<std::size_t>(subj)];
        const CategoryPrior& b = cats_[static_cast<std::size_t>(obj)];

        // subject strictly on the named side of the object, by construction
        double ax_lo = 0.08, ax_hi = 0.42, bx_lo = 0.58, bx_hi = 0.92;
        double ay_lo = 0.10, ay_hi = 0.90, by_lo = 0.10, by_hi = 0.90;
        const bool horizontal = (rel == Relation::left || rel == Relation::right);
        if (!horizontal) {
            ay_lo = 0.08; ay_hi = 0.42; by_lo = 0.58; by_hi = 0.92;
            ax_lo = 0.10; ax_hi = 0.90; bx_lo = 0.10; bx_hi = 0.90;
        }
        const bool swap = (rel == Relation::right || rel == Relation::below);
        if (swap) {
            std::swap(ax_lo, bx_lo); std::swap(ax_hi, bx_hi);
            std::swap(ay_lo, by_lo); std::swap(ay_hi, by_hi);
        }
        Layout layout;
        layout.width = canvas.w;
        layout.height = canvas.h;
        layout.objects.push_back(
            {a.name, corpus_detail::sample_box(a, canvas.w, canvas.h, ax_lo, ax_hi, ay_lo, ay_hi, rng)});
        layout.objects.push_back(
            {b.name, corpus_detail::sample_box(b, canvas.w, canvas.h, bx_lo, bx_hi, by_lo, by_hi, rng)});

        static const char* phrases[] = {"to the left of", "to the right of", "above", "below"};
        std::string prompt = corpus_detail::article_for(a.name) + " " + a.name + " " +
                             phrases[static_cast<int>(rel)] + " " +
                             corpus_detail::article_for(b.name) + " " + b.name;
        GroundTruth gt;
        gt.relation = rel;
        gt.subject = a.name;
        gt.object = b.name;
        gt.counts = {{a.name, 1}, {b.name, 1}};

        // extra objects, all mentioned in the prompt, never reusing the
        // relation pair's categories
        const double u = rng.uniform();
        int extras = u < 0.2 ? 0 : (u < 0.45 ? 1 : (u < 0.75 ? 2 : 3));
        std::vector<int> used = {subj, obj};
        std::vector<std::string> extra_phrases;
        int budget = spec_.max_objects - 2;
        for (int e = 0; e < extras && budget > 0; ++e) {
            int cat_idx;
            do {
                cat_idx = pick_category(rng);
            } while (std::find(used.begin(), used.end(), cat_idx) != used.end());
            used.push_back(cat_idx);
            const CategoryPrior& cat = cats_[static_cast<std::size_t>(cat_idx)];
            const int count = std::min<int>(static_cast<int>(rng.uniform_int(1, 2)), budget);
            budget -= count;
            for (int i = 0; i < count; ++i) {
                layout.objects.push_back({cat.name, corpus_detail::sample_box(
                                                        cat, canvas.w, canvas.h, 0.05, 0.95, 0.05,
                                                        0.95, rng)});
            }
            extra_phrases.push_back(corpus_detail::noun_phrase(cat, count));
            gt.counts.emplace_back(cat.name, count);
        }
        if (!extra_phrases.empty()) {
            prompt += " with ";
            for (std::size_t i = 0; i < extra_phrases.size(); ++i) {
                if (i > 0) prompt += (i + 1 == extra_phrases.size()) ? " and " : ", ";
                prompt += extra_phrases[i];
            }
        }
        prompt[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(prompt[0])));
        prompt += ".";
        LayoutRecord rec;
        rec.prompt = prompt;
        rec.layout = std::move(layout);
        rec.ground_truth = std::move(gt);
        return rec;
    }

    LayoutRecord count_scene(Rng& rng) const {
        const CanvasSize canvas = pick_canvas(rng);
        int item_idx = pick_category(rng);
        const int count =
            static_cast<int>(rng.uniform_int(3, std::min(7, spec_.max_objects - 1)));
        const bool on_surface = rng.uniform() < 0.6;
        int surface_idx = -1;
        if (on_surface) {
            std::vector<int> surfaces;
            for (std::size_t i = 0; i < cats_.size(); ++i) {
                if (cats_[i].surface && static_cast<int>(i) != item_idx) {
                    surfaces.push_back(static_cast<int>(i));
                }
            }
            if (!surfaces.empty()) {
                surface_idx = surfaces[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<long>(surfaces.size()) - 1))];
            }
        }
        const CategoryPrior& item = cats_[static_cast<std::size_t>(item_idx)];
        Layout layout;
        layout.width = canvas.w;
        layout.height = canvas.h;
        GroundTruth gt;
        gt.relation = Relation::none;
        std::string prompt = std::string(corpus_detail::count_word(count)) + " " + item.plural;
        gt.counts = {{item.name, count}};
        if (surface_idx >= 0) {
            const CategoryPrior& surface = cats_[static_cast<std::size_t>(surface_idx)];
            // items sit in the upper region, the surface spans the lower half
            for (int i = 0; i < count; ++i) {
                layout.objects.push_back({item.name, corpus_detail::sample_box(
                                                         item, canvas.w, canvas.h, 0.10, 0.90, 0.12,
                                                         0.55, rng)});
            }
            layout.objects.push_back({surface.name,
                                      corpus_detail::sample_box(surface, canvas.w, canvas.h, 0.25,
                                                                0.75, 0.60, 0.85, rng)});
            prompt += " on " + corpus_detail::article_for(surface.name) + " " + surface.name;
            gt.counts.emplace_back(surface.name, 1);
        } else {
            for (int i = 0; i < count; ++i) {
                layout.objects.push_back({item.name, corpus_detail::sample_box(
                                                         item, canvas.w, canvas.h, 0.05, 0.95, 0.05,
                                                         0.95, rng)});
            }
        }
        prompt[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(prompt[0])));
        prompt += ".";
        LayoutRecord rec;
        rec.prompt = prompt;
        rec.layout = std::move(layout);
        rec.ground_truth = std::move(gt);
        return rec;
    }

    LayoutRecord plain_scene(Rng& rng) const {
        const CanvasSize canvas = pick_canvas(rng);
        const int groups = static_cast<int>(rng.uniform_int(2, 4));
        Layout layout;
        layout.width = canvas.w;
        layout.height = canvas.h;
        GroundTruth gt;
        gt.relation = Relation::none;
        std::vector<int> used;
        std::vector<std::string> phrases;
        int budget = spec_.max_objects;
        for (int gidx = 0; gidx < groups && budget > 0; ++gidx) {
            int cat_idx;
            do {
                cat_idx = pick_category(rng);
            } while (std::find(used.begin(), used.end(), cat_idx) != used.end());
            used.push_back(cat_idx);
            const CategoryPrior& cat = cats_[static_cast<std::size_t>(cat_idx)];
            const int count = std::min<int>(static_cast<int>(rng.uniform_int(1, 2)), budget);
            budget -= count;
            for (int i = 0; i < count; ++i) {
                layout.objects.push_back({cat.name, corpus_detail::sample_box(
                                                        cat, canvas.w, canvas.h, 0.05, 0.95, 0.05,
                                                        0.95, rng)});
            }
            phrases.push_back(corpus_detail::noun_phrase(cat, count));
            gt.counts.emplace_back(cat.name, count);
        }
        std::string prompt;
        for (std::size_t i = 0; i < phrases.size(); ++i) {
            if (i > 0) prompt += (i + 1 == phrases.size()) ? " and " : ", ";
            prompt += phrases[i];
        }
        prompt[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(prompt[0])));
        prompt += ".";
        LayoutRecord rec;
        rec.prompt = prompt;
        rec.layout = std::move(layout);
        rec.ground_truth = std::move(gt);
        return rec;
    }

    CorpusSpec spec_;
    std::vector<CategoryPrior> cats_;
};

struct CorpusStats {
    long scenes = 0;
    double mean_objects = 0.0;
    std::array<long, 5> relation_counts{};  // indexed by Relation
};

inline CorpusStats corpus_statistics(const std::vector<LayoutRecord>& records) {
    CorpusStats stats;
    stats.scenes = static_cast<long>(records.size());
    long objects = 0;
    for (const auto& rec : records) {
        objects += static_cast<long>(rec.layout.objects.size());
        if (rec.ground_truth) {
            stats.relation_counts[static_cast<std::size_t>(rec.ground_truth->relation)]++;
        }
    }
    stats.mean_objects = stats.scenes > 0 ? static_cast<double>(objects) / stats.scenes : 0.0;
    return stats;
}

// Emit train/val splits in the standard record format.
inline CorpusStats generate_corpus(const CorpusSpec& spec, const std::string& out_dir) {
    CorpusGenerator gen(spec);
    std::filesystem::create_directories(out_dir);
    const auto train = gen.generate_split(false, spec.train_scenes);
    const auto val = gen.generate_split(true, spec.val_scenes);
    write_corpus(out_dir + "/train.jsonl", train);
    write_corpus(out_dir + "/val.jsonl", val);
    CorpusStats stats = corpus_statistics(train);
    return stats;
}

}  // namespace layoutdiff
