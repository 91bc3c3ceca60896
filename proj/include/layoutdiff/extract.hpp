#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layoutdiff/errors.hpp"

namespace layoutdiff {

// Mapping from object description to its count in the scene, insertion
// ordered. Descriptions are lowercase singular noun phrases.
struct DescriptionSet {
    std::vector<std::pair<std::string, int>> entries;

    void add(const std::string& phrase, int count) {
        for (auto& e : entries) {
            if (e.first == phrase) {
                e.second += count;
                return;
            }
        }
        entries.emplace_back(phrase, count);
    }

    int count_of(const std::string& phrase) const {
        for (const auto& e : entries) {
            if (e.first == phrase) return e.second;
        }
        return 0;
    }

    int total() const {
        int sum = 0;
        for (const auto& e : entries) sum += e.second;
        return sum;
    }

    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }

    bool operator==(const DescriptionSet& o) const { return entries == o.entries; }

    // One description per object instance, insertion order, instances
    // contiguous. The denoiser consumes one token per instance.
    std::vector<std::string> expand() const {
        std::vector<std::string> out;
        for (const auto& [phrase, count] : entries) {
            for (int i = 0; i < count; ++i) out.push_back(phrase);
        }
        return out;
    }

    // Wire format: {"phrase": count, ...} in insertion order.
    std::string to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (const auto& [phrase, count] : entries) j[phrase] = count;
        return j.dump();
    }

    static DescriptionSet from_json(const std::string& text) {
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("invalid description set: ") + e.what());
        }
        return from_parsed(j);
    }

    static DescriptionSet from_parsed(const nlohmann::ordered_json& j) {
        if (!j.is_object()) throw ParseError("description set must be a JSON object");
        DescriptionSet set;
        for (const auto& [key, value] : j.items()) {
            if (!value.is_number_integer() || value.get<long>() < 1) {
                throw ParseError("count for '" + key + "' must be a positive integer");
            }
            std::string phrase = key;
            std::transform(phrase.begin(), phrase.end(), phrase.begin(),
                           [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
            if (phrase.find_first_not_of(" \t") == std::string::npos) {
                throw ParseError("empty description in set");
            }
            set.add(phrase, static_cast<int>(value.get<long>()));
        }
        return set;
    }

    void validate(int max_objects) const {
        for (const auto& [phrase, count] : entries) {
            if (phrase.empty()) throw ContractError("empty description");
            if (count < 1) throw ContractError("non-positive count for '" + phrase + "'");
        }
        if (total() > max_objects) {
            throw ContractError("description set expands to " + std::to_string(total()) +
                                " objects, capacity is " + std::to_string(max_objects));
        }
    }
};

namespace detail {

inline const std::unordered_set<std::string>& determiner_words() {
    static const std::unordered_set<std::string> words = {
        "a", "an", "the", "his", "her", "its", "their", "this", "that",
        "these", "those", "my", "your", "our", "one's", "each", "every",
    };
    return words;
}

inline const std::unordered_map<std::string, int>& number_words() {
    static const std::unordered_map<std::string, int> words = {
        {"one", 1}, {"two", 2}, {"three", 3}, {"four", 4},  {"five", 5},
        {"six", 6}, {"seven", 7}, {"eight", 8}, {"nine", 9}, {"ten", 10},
    };
    return words;
}

// Vague quantity words with a fixed deterministic reading.
inline const std::unordered_map<std::string, int>& quantifier_words() {
    static const std::unordered_map<std::string, int> words = {
        {"couple", 2}, {"pair", 2}, {"few", 2}, {"some", 2},
        {"several", 3}, {"group", 3}, {"many", 4}, {"bunch", 3},
    };
    return words;
}

inline const std::unordered_set<std::string>& adjective_words() {
    static const std::unordered_set<std::string> words = {
        "white", "black", "brown", "red", "blue", "green", "yellow", "gray", "grey",
        "orange", "purple", "pink", "golden", "silver", "dark", "light", "bright",
        "big", "small", "large", "little", "tiny", "huge", "giant", "tall", "short",
        "long", "wide", "narrow", "old", "young", "new", "happy", "sad", "angry",
        "cute", "beautiful", "pretty", "ugly", "dirty", "clean", "wet", "dry",
        "hot", "cold", "warm", "barefoot", "busy", "empty", "full", "open", "closed",
        "fluffy", "furry", "striped", "spotted", "wooden", "metallic", "shiny",
        "fast", "slow", "fresh", "round", "square", "flat", "thin", "thick",
    };
    return words;
}

// Extracted noun phrases whose head is in this list are dropped: body parts,
// spatial nouns, and other phrases that do not stand for a drawable object.
inline const std::unordered_set<std::string>& stop_nouns() {
    static const std::unordered_set<std::string> words = {
        "back", "front", "side", "top", "bottom", "middle", "center", "left", "right",
        "edge", "corner", "end", "part", "way", "time", "day", "night", "morning",
        "evening", "afternoon", "kind", "sort", "type", "group", "couple", "pair",
        "few", "lot", "number", "amount", "photo", "picture", "image", "view",
        "scene", "background", "foreground", "distance", "area", "place", "thing",
    };
    return words;
}

inline const std::unordered_map<std::string, std::string>& irregular_plurals() {
    static const std::unordered_map<std::string, std::string> map = {
        {"men", "man"},       {"women", "woman"},   {"children", "child"},
        {"people", "person"}, {"feet", "foot"},     {"teeth", "tooth"},
        {"geese", "goose"},   {"mice", "mouse"},    {"oxen", "ox"},
        {"wolves", "wolf"},   {"knives", "knife"},  {"leaves", "leaf"},
        {"shelves", "shelf"}, {"loaves", "loaf"},   {"lives", "life"},
    };
    return map;
}

// Nouns whose singular and plural forms coincide.
inline const std::unordered_set<std::string>& invariant_plural_nouns() {
    static const std::unordered_set<std::string> words = {"sheep", "fish", "deer", "aircraft"};
    return words;
}

inline const std::unordered_set<std::string>& noun_words() {
    static const std::unordered_set<std::string> words = {
        // people
        "person", "man", "woman", "child", "kid", "boy", "girl", "baby", "player",
        "rider", "driver", "worker", "farmer", "crowd",
        // animals
        "dog", "cat", "bird", "horse", "cow", "bear", "zebra", "giraffe", "sheep",
        "elephant", "mouse", "goose", "duck", "fish", "deer", "puppy", "kitten", "ox",
        // vehicles
        "car", "bus", "truck", "boat", "ship", "train", "airplane", "plane",
        "bicycle", "bike", "motorcycle", "skateboard", "surfboard", "engine", "wheel",
        // outdoor scene
        "tree", "grass", "field", "road", "street", "sidewalk", "path", "building",
        "house", "tower", "bridge", "fence", "sign", "pole", "bench", "hydrant",
        "sky", "cloud", "sun", "moon", "star", "mountain", "hill", "rock", "stone",
        "river", "lake", "ocean", "sea", "beach", "sand", "snow", "wave", "flower",
        "plant", "bush", "leaf", "park", "town", "city", "village", "slope", "kite",
        // indoor scene
        "table", "chair", "couch", "sofa", "bed", "desk", "shelf", "cabinet",
        "drawer", "lamp", "mirror", "painting", "frame", "window", "door", "wall",
        "floor", "ceiling", "rug", "carpet", "pillow", "blanket", "towel", "cubicle",
        // objects
        "laptop", "computer", "keyboard", "monitor", "screen", "phone", "television",
        "tv", "book", "clock", "vase", "toy", "ball", "umbrella", "bag", "backpack",
        "hat", "shirt", "dress", "shoe", "sock", "glove", "scarf", "container", "box",
        "basket", "bucket", "bottle", "cup", "mug", "glass", "plate", "bowl", "fork",
        "knife", "spoon", "pot", "pan", "teapot", "kettle", "jar", "can", "pizza",
        "sandwich", "cake", "donut", "banana", "apple", "orange", "food", "bread",
        "loaf", "life", "foot", "tooth", "wolf",
        // materials and common modifiers used attributively
        "plastic", "wood", "metal", "dirt", "brick", "paper", "office",
    };
    return words;
}

inline std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Lowercased word tokens; punctuation splits, apostrophes and hyphens stay.
inline std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isalnum(c) || c == '\'' || c == '-') {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(current);
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(current);
    return tokens;
}

// Head-noun rewrites for redundant compounds.
inline const std::unordered_map<std::string, std::string>& compound_reductions() {
    static const std::unordered_map<std::string, std::string> map = {
        {"laptop computer", "laptop"},
    };
    return map;
}

inline bool ends_with(const std::string& s, const char* suffix) {
    const std::size_t n = std::char_traits<char>::length(suffix);
    return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

inline std::string singularize(const std::string& word) {
    const auto& irregular = irregular_plurals();
    if (auto it = irregular.find(word); it != irregular.end()) return it->second;
    if (invariant_plural_nouns().count(word)) return word;
    if (word.size() > 3 && ends_with(word, "ies")) return word.substr(0, word.size() - 3) + "y";
    if (word.size() > 3 && (ends_with(word, "sses") || ends_with(word, "shes") ||
                            ends_with(word, "ches") || ends_with(word, "xes") ||
                            ends_with(word, "zes") || ends_with(word, "oes"))) {
        return word.substr(0, word.size() - 2);
    }
    if (word.size() > 2 && ends_with(word, "s") && !ends_with(word, "ss") &&
        !ends_with(word, "us") && !ends_with(word, "is")) {
        return word.substr(0, word.size() - 1);
    }
    return word;
}

inline bool is_plural_form(const std::string& word) {
    if (irregular_plurals().count(word)) return true;
    if (invariant_plural_nouns().count(word)) return false;
    return singularize(word) != word;
}

inline bool is_known_noun(const std::string& word) {
    if (noun_words().count(word)) return true;
    const std::string sing = singularize(word);
    return sing != word && noun_words().count(sing) > 0;
}

inline bool parse_count_token(const std::string& tok, int* value) {
    if (!tok.empty() && std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
        *value = std::stoi(tok);
        return true;
    }
    if (auto it = number_words().find(tok); it != number_words().end()) {
        *value = it->second;
        return true;
    }
    return false;
}

}  // namespace detail

// Deterministic description-set extraction. Noun phrases are scanned with a
// small lexicon, heads are singularized, counts come from explicit numerals
// or quantity words (bare plural -> 2, bare singular -> 1), and heads on the
// stop list are filtered out. Unknown words count as nouns only inside an
// already-open noun phrase, which keeps open-vocabulary prompts usable
// without tagging every verb.
class DescriptionExtractor {
public:
    DescriptionSet extract(const std::string& prompt) const {
        using namespace detail;
        const std::vector<std::string> tokens = tokenize(prompt);
        DescriptionSet set;
        std::size_t i = 0;
        while (i < tokens.size()) {
            bool in_np = false;
            int explicit_count = -1;
            // Determiner / numeral / quantifier prefix, in any sensible order
            // ("the two", "a couple of", "two").
            while (i < tokens.size()) {
                const std::string& tok = tokens[i];
                int value = 0;
                if (determiner_words().count(tok)) {
                    in_np = true;
                    ++i;
                } else if (parse_count_token(tok, &value)) {
                    explicit_count = value;
                    in_np = true;
                    ++i;
                } else if (auto it = quantifier_words().find(tok);
                           it != quantifier_words().end() && explicit_count < 0) {
                    explicit_count = it->second;
                    in_np = true;
                    ++i;
                    if (i < tokens.size() && tokens[i] == "of") ++i;
                } else {
                    break;
                }
            }
            // Modifier and noun run. Adjectives are dropped, attributive
            // nouns are kept, the last noun is the head.
            std::vector<std::string> nouns;
            while (i < tokens.size()) {
                const std::string& tok = tokens[i];
                if (adjective_words().count(tok)) {
                    in_np = true;
                    ++i;
                    continue;
                }
                const bool known = is_known_noun(tok);
                const bool unknown_in_np = !known && in_np && !is_breaker(tok);
                if (known || unknown_in_np) {
                    nouns.push_back(tok);
                    in_np = true;
                    ++i;
                    continue;
                }
                break;
            }
            if (nouns.empty()) {
                ++i;  // breaker token, move on
                continue;
            }
            const std::string head_raw = nouns.back();
            const bool plural = is_plural_form(head_raw);
            nouns.back() = singularize(head_raw);
            std::string phrase = nouns.front();
            for (std::size_t k = 1; k < nouns.size(); ++k) phrase += " " + nouns[k];
            if (auto it = compound_reductions().find(phrase); it != compound_reductions().end()) {
                phrase = it->second;
            }
            if (stop_nouns().count(nouns.back()) || stop_nouns().count(phrase)) continue;
            const int count = explicit_count > 0 ? explicit_count : (plural ? 2 : 1);
            set.add(phrase, count);
        }
        if (set.empty()) {
            throw EmptyDescriptionSetError("no object descriptions found in prompt: '" + prompt + "'");
        }
        return set;
    }

private:
    static std::vector<std::string> tokenize(const std::string& prompt) {
        return detail::tokenize_words(prompt);
    }

    // Words that always terminate a noun phrase even mid-NP, so unknown
    // verbs/prepositions after a determiner do not get swallowed.
    static bool is_breaker(const std::string& tok) {
        static const std::unordered_set<std::string> breakers = {
            "and", "or", "of", "on", "in", "at", "to", "by", "with", "without", "near",
            "under", "over", "behind", "above", "below", "beside", "between", "against",
            "along", "across", "around", "through", "into", "onto", "next", "down", "up",
            "is", "are", "was", "were", "be", "being", "been", "has", "have", "had",
            "there", "here", "while", "during", "for", "from", "as", "but", "not",
        };
        if (breakers.count(tok)) return true;
        // Gerunds and participles not in the noun lexicon read as verbs.
        if (detail::ends_with(tok, "ing") && !detail::noun_words().count(tok)) return true;
        if (detail::ends_with(tok, "ed") && !detail::noun_words().count(tok)) return true;
        return false;
    }
};

// Convenience wrapper matching the operation name used by the pipelines.
inline DescriptionSet extract_description_set(const std::string& prompt) {
    return DescriptionExtractor().extract(prompt);
}

}  // namespace layoutdiff
