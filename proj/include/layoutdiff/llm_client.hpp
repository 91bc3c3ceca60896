#pragma once

#include <atomic>
#include <cstdlib>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/extract.hpp"

namespace layoutdiff {

// Process-wide switch used by tests and stub-mode pipelines to prove that no
// network endpoint is ever touched offline.
class NetworkGuard {
public:
    static std::atomic<bool>& forbidden() {
        static std::atomic<bool> flag{false};
        return flag;
    }
    static std::atomic<long>& attempts() {
        static std::atomic<long> count{0};
        return count;
    }
    static void note_attempt() {
        attempts().fetch_add(1);
        if (forbidden().load()) {
            throw LlmError("network access attempted while in offline/stub mode");
        }
    }
};

struct LlmOptions {
    std::string endpoint;           // full URL of a chat-completion endpoint
    std::string model;
    double temperature = 0.0;
    std::string api_key_env = "LLM_API_KEY";  // credentials only via environment

    std::string api_key() const {
        const char* v = std::getenv(api_key_env.c_str());
        return v ? std::string(v) : std::string();
    }
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::string& system_prompt, const std::string& user_prompt) = 0;
};

// Canned-response client for tests and offline fixtures.
class ScriptedLlmClient : public LlmClient {
public:
    explicit ScriptedLlmClient(std::vector<std::string> responses) : responses_(std::move(responses)) {}

    std::string complete(const std::string&, const std::string&) override {
        if (next_ >= responses_.size()) throw LlmError("scripted client ran out of responses");
        return responses_[next_++];
    }

private:
    std::vector<std::string> responses_;
    std::size_t next_ = 0;
};

// Instruction block sent verbatim as the system prompt for description-set
// extraction. The contract with the model: think in four steps, emit the
// final scene as a single JSON object of noun phrases and counts.
inline const char* scene_designer_system_prompt() {
    return R"(You are a creative scene designer who predicts a scene from a natural language prompt. A scene is a JSON object containing a list of noun phrases with their counts {"phrase1": count1, "phrase2": count2, ...}. The noun phrases contain **ONLY** common nouns. You strictly follow the below process for predicting plausible scenes:

Step 1: Extract noun phrases from the prompt. For example, "happy people", "car engine", "brown dog", "parking lot", etc.
Step 2: Limit noun phrases to common nouns and convert the noun phrase to its singular form. For example, "happy people" to "person", "tall women" to "woman", "group of old people" to "person", "children" to "child", "brown dog" to "dog", "parking lot" remains "parking lot", etc.
Step 3: Predict the count of each noun phrase and ensure consistency with the count of other objects in the scene. If a particular object does not have any explicit count mentioned in the prompt, use your creativity to assign a count to make the overall scene plausible but not too cluttered. For example, if the prompt is "a group of young kids playing with their dogs," the count of "kid" can be 3, and the count of "dog" should be the same as the count of "kid".
Step 4: Output the final scene as a JSON object, only including physical objects and phrases without referring to actions or activities.

Complete example:

Prompt: Three white sheep and few women walking down a town road.
Steps:
Step 1: noun phrases: white sheep, women, town road
Step 2: noun phrase in singular form: sheep, woman, town road
Step 3: Since the count of women is not mentioned, we will assign a count of 2 to make the scene plausible. The count of "sheep" is 3 and the count of "town road" is 1.
Step 4: {"sheep": 3, "woman": 2, "town road": 1}
Plausible scene: {"sheep": 3, "woman": 2, "town road": 1}

Other examples with skipped step-by-step process:

Prompt: A desk and office chair in the cubicle
Plausible scene: {"office desk": 1, "office chair": 1, "cubicle": 1}

Prompt: A pizza is in a box on a corner desk table.
Plausible scene: {"pizza": 1, "box": 1, "desk table": 1}

Note: Print **ONLY** the final scene as a JSON object.)";
}

// The model may ramble through its steps before printing the scene; the last
// well-formed object literal wins.
inline DescriptionSet parse_description_set_response(const std::string& text) {
    DescriptionSet best;
    bool found = false;
    for (std::size_t start = 0; start < text.size(); ++start) {
        if (text[start] != '{') continue;
        int depth = 0;
        bool in_string = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (c == '\\') {
                    ++i;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    try {
                        best = DescriptionSet::from_json(text.substr(start, i - start + 1));
                        found = true;
                    } catch (const ParseError&) {
                        // candidate was not a description set; keep scanning
                    }
                    break;
                }
            }
        }
    }
    if (!found) throw ParseError("no description-set object literal in LLM response");
    return best;
}

// Ask an external model for the description set. No silent fallback: callers
// that want the rule-based extractor on failure must catch and decide.
inline DescriptionSet llm_extract(const std::string& prompt, LlmClient& client, int max_objects = 16) {
    const std::string response = client.complete(scene_designer_system_prompt(), "Prompt: " + prompt);
    DescriptionSet set = parse_description_set_response(response);
    set.validate(max_objects);
    return set;
}

}  // namespace layoutdiff
