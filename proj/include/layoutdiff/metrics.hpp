#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "layoutdiff/extract.hpp"
#include "layoutdiff/geometry.hpp"
#include "layoutdiff/layout_io.hpp"

namespace layoutdiff {

struct NumericalScores {
    double precision = 0.0;
    double recall = 0.0;
    double accuracy = 0.0;
};

// Multiset precision/recall over description sets; counts matter. Accuracy
// is all-or-nothing: 1 only when the multisets match exactly.
inline NumericalScores numerical_metrics(const DescriptionSet& pred, const DescriptionSet& gt) {
    std::map<std::string, int> p, g;
    for (const auto& [k, v] : pred.entries) p[k] += v;
    for (const auto& [k, v] : gt.entries) g[k] += v;
    long inter = 0;
    for (const auto& [k, v] : p) {
        const auto it = g.find(k);
        if (it != g.end()) inter += std::min(v, it->second);
    }
    const long np = pred.total();
    const long ng = gt.total();
    NumericalScores scores;
    scores.precision = np > 0 ? static_cast<double>(inter) / np : (ng == 0 ? 1.0 : 0.0);
    scores.recall = ng > 0 ? static_cast<double>(inter) / ng : (np == 0 ? 1.0 : 0.0);
    scores.accuracy = (p == g) ? 1.0 : 0.0;
    return scores;
}

// The description multiset a layout realizes.
inline DescriptionSet layout_description_set(const Layout& layout) {
    DescriptionSet set;
    for (const auto& obj : layout.objects) set.add(obj.description, 1);
    return set;
}

// 1 when the first-named subject/object instances satisfy the relation on
// box centers (top-left origin: above means a smaller center y), 0 otherwise
// or when either participant is missing.
inline int spatial_accuracy(const Layout& layout, Relation relation, const std::string& subject,
                            const std::string& object) {
    const SceneObject* subj = nullptr;
    const SceneObject* obj = nullptr;
    for (const auto& o : layout.objects) {
        if (!subj && o.description == subject) {
            subj = &o;
            continue;
        }
        if (!obj && o.description == object) obj = &o;
    }
    if (!subj || !obj) return 0;
    switch (relation) {
        case Relation::left: return subj->box.center_x() < obj->box.center_x() ? 1 : 0;
        case Relation::right: return subj->box.center_x() > obj->box.center_x() ? 1 : 0;
        case Relation::above: return subj->box.center_y() < obj->box.center_y() ? 1 : 0;
        case Relation::below: return subj->box.center_y() > obj->box.center_y() ? 1 : 0;
        default: return 0;
    }
}

struct ExampleScore {
    NumericalScores numerical;
    int spatial = -1;  // -1 = no relation annotation
};

struct MetricReport {
    double precision = 0.0;
    double recall = 0.0;
    double accuracy = 0.0;
    double spatial = 0.0;
    double l_fid = -1.0;  // < 0 = not computed
    long numerical_examples = 0;
    long spatial_examples = 0;
    std::vector<ExampleScore> breakdown;

    void add_numerical(const NumericalScores& s) {
        precision = (precision * numerical_examples + s.precision) / (numerical_examples + 1);
        recall = (recall * numerical_examples + s.recall) / (numerical_examples + 1);
        accuracy = (accuracy * numerical_examples + s.accuracy) / (numerical_examples + 1);
        ++numerical_examples;
    }

    void add_spatial(int hit) {
        spatial = (spatial * spatial_examples + hit) / (spatial_examples + 1);
        ++spatial_examples;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"precision", precision},
                            {"recall", recall},
                            {"accuracy", accuracy},
                            {"spatial_accuracy", spatial},
                            {"numerical_examples", numerical_examples},
                            {"spatial_examples", spatial_examples}};
        if (l_fid >= 0.0) j["l_fid"] = l_fid;
        return j;
    }

    std::string table() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "precision %-7.4f recall %-7.4f accuracy %-7.4f spatial %-7.4f l_fid %s",
                      precision, recall, accuracy, spatial,
                      l_fid >= 0.0 ? std::to_string(l_fid).c_str() : "n/a");
        return buf;
    }
};

}  // namespace layoutdiff
