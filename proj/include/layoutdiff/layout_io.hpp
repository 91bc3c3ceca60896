#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/geometry.hpp"

namespace layoutdiff {

enum class Relation { left, right, above, below, none };

inline const char* to_string(Relation r) {
    switch (r) {
        case Relation::left: return "left";
        case Relation::right: return "right";
        case Relation::above: return "above";
        case Relation::below: return "below";
        default: return "none";
    }
}

inline Relation relation_from_string(const std::string& s) {
    if (s == "left") return Relation::left;
    if (s == "right") return Relation::right;
    if (s == "above") return Relation::above;
    if (s == "below") return Relation::below;
    if (s == "none") return Relation::none;
    throw ParseError("unknown relation '" + s + "'");
}

// Optional machine-readable annotation carried by synthetic corpus records.
struct GroundTruth {
    Relation relation = Relation::none;
    std::string subject;  // set when relation != none
    std::string object;
    std::vector<std::pair<std::string, int>> counts;  // description -> count
};

// One corpus record: a prompt, its layout, and optional ground truth.
struct LayoutRecord {
    std::string prompt;
    Layout layout;
    std::optional<GroundTruth> ground_truth;
};

using ordered_json = nlohmann::ordered_json;

inline ordered_json record_to_json(const LayoutRecord& rec) {
    ordered_json j;
    j["prompt"] = rec.prompt;
    j["width"] = rec.layout.width;
    j["height"] = rec.layout.height;
    j["objects"] = ordered_json::array();
    for (const auto& obj : rec.layout.objects) {
        ordered_json o;
        o["description"] = obj.description;
        o["box"] = {obj.box.x0, obj.box.y0, obj.box.x1, obj.box.y1};
        j["objects"].push_back(std::move(o));
    }
    if (rec.ground_truth) {
        const GroundTruth& gt = *rec.ground_truth;
        ordered_json g;
        g["relation"] = to_string(gt.relation);
        g["categories"] = ordered_json::array();
        if (gt.relation != Relation::none) {
            g["categories"].push_back(gt.subject);
            g["categories"].push_back(gt.object);
        }
        g["counts"] = ordered_json::object();
        for (const auto& [desc, count] : gt.counts) g["counts"][desc] = count;
        j["ground_truth"] = std::move(g);
    }
    return j;
}

inline LayoutRecord record_from_json(const ordered_json& j) {
    LayoutRecord rec;
    if (!j.is_object() || !j.contains("prompt") || !j.contains("width") || !j.contains("height") ||
        !j.contains("objects")) {
        throw ParseError("record missing required fields (prompt, width, height, objects)");
    }
    rec.prompt = j.at("prompt").get<std::string>();
    rec.layout.width = j.at("width").get<double>();
    rec.layout.height = j.at("height").get<double>();
    for (const auto& o : j.at("objects")) {
        SceneObject obj;
        obj.description = o.at("description").get<std::string>();
        const auto& b = o.at("box");
        if (!b.is_array() || b.size() != 4) throw ParseError("box must be [x0, y0, x1, y1]");
        obj.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        rec.layout.objects.push_back(std::move(obj));
    }
    if (j.contains("ground_truth")) {
        GroundTruth gt;
        const auto& g = j.at("ground_truth");
        gt.relation = relation_from_string(g.at("relation").get<std::string>());
        if (g.contains("categories") && g.at("categories").size() == 2) {
            gt.subject = g.at("categories")[0].get<std::string>();
            gt.object = g.at("categories")[1].get<std::string>();
        }
        if (g.contains("counts")) {
            for (const auto& [desc, count] : g.at("counts").items()) {
                gt.counts.emplace_back(desc, count.get<int>());
            }
        }
        rec.ground_truth = std::move(gt);
    }
    return rec;
}

inline std::string record_to_line(const LayoutRecord& rec) { return record_to_json(rec).dump(); }

inline LayoutRecord record_from_line(const std::string& line, long line_number = -1) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
    try {
        return record_from_json(j);
    } catch (const ParseError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad record: ") + e.what(), line_number);
    }
}

// Streaming line-oriented reader. Records before a malformed line remain
// usable; the bad line raises a ParseError carrying its number.
class CorpusReader {
public:
    explicit CorpusReader(const std::string& path) : path_(path), in_(path) {
        if (!in_) throw ParseError("cannot open corpus file '" + path + "'");
    }

    std::optional<LayoutRecord> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_number_;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            LayoutRecord rec = record_from_line(line, line_number_);
            validate_layout(rec.layout);
            if (rec.layout.objects.empty()) {
                throw ParseError("record has no objects", line_number_);
            }
            return rec;
        }
        return std::nullopt;
    }

    long line_number() const { return line_number_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    long line_number_ = 0;
};

struct CorpusLoadStats {
    long records = 0;
    long clamped_boxes = 0;
    long zero_area_boxes = 0;
};

// Load a whole corpus, clamping boxes to their canvas at ingestion and
// counting how many needed it.
inline std::vector<LayoutRecord> load_corpus(const std::string& path, CorpusLoadStats* stats = nullptr) {
    CorpusReader reader(path);
    std::vector<LayoutRecord> records;
    CorpusLoadStats local;
    while (auto rec = reader.next()) {
        for (auto& obj : rec->layout.objects) {
            const BoundingBox clamped = clamp_box(obj.box, rec->layout.width, rec->layout.height);
            if (!(clamped == obj.box)) {
                ++local.clamped_boxes;
                obj.box = clamped;
            }
            if (obj.box.area() <= 0.0) ++local.zero_area_boxes;
        }
        records.push_back(std::move(*rec));
        ++local.records;
    }
    if (stats) *stats = local;
    return records;
}

inline void write_corpus(const std::string& path, const std::vector<LayoutRecord>& records) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& rec : records) out << record_to_line(rec) << '\n';
}

}  // namespace layoutdiff
