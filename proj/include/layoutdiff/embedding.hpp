#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/extract.hpp"
#include "layoutdiff/nn.hpp"
#include "layoutdiff/rng.hpp"

namespace layoutdiff {

// Encoded conditioning for one layout: token vectors for the global prompt
// and one vector per object description instance. Row attributions point
// back into a trainable embedding table (empty when the encoder is frozen).
template <class S>
struct PromptEncoding {
    nn::Mat<S> prompt_tokens;  // M x width
    std::vector<int> prompt_rows;
    nn::Mat<S> desc_vectors;  // N x width
    std::vector<std::vector<std::pair<int, S>>> desc_rows;
    bool is_null = false;
};

inline constexpr const char* kNullPrompt = "<null>";

// Adapter boundary: anything that turns text into fixed-width vectors can
// condition the denoiser.
template <class S>
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int width() const = 0;
    virtual nn::Vec<S> encode_phrase(const std::string& phrase,
                                     std::vector<std::pair<int, S>>* rows = nullptr) const = 0;
    virtual nn::Mat<S> encode_prompt(const std::string& prompt,
                                     std::vector<int>* rows = nullptr) const = 0;
    // Designated encoding substituted for the prompt under classifier-free
    // guidance training and for the unconditional guidance branch.
    virtual nn::Mat<S> null_prompt(std::vector<int>* rows = nullptr) const = 0;
    virtual nn::Param<S>* trainable_table() { return nullptr; }
    virtual std::uint64_t vocabulary_hash() const = 0;
};

// Default provider: a deterministic embedding table over a closed vocabulary
// with hash buckets for out-of-vocabulary words. The table can be trained
// with the model or frozen.
template <class S>
class VocabEmbedding : public TextEncoder<S> {
public:
    VocabEmbedding(std::vector<std::string> vocabulary, int width, int buckets = 1 << 16,
                   std::uint64_t seed = 7, bool trainable = true)
        : width_(width), buckets_(buckets), trainable_(trainable) {
        std::sort(vocabulary.begin(), vocabulary.end());
        vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
        vocab_ = std::move(vocabulary);
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            index_[vocab_[i]] = static_cast<int>(i) + 1;  // row 0 is the null token
        }
        std::uint64_t h = fnv1a64(std::to_string(width_) + "/" + std::to_string(buckets_));
        for (const auto& w : vocab_) h = fnv1a64(w + "\n", h);
        vocab_hash_ = h;
        table_.name = "encoder.table";
        table_.resize(1 + static_cast<Eigen::Index>(vocab_.size()) + buckets_, width_);
        Rng rng(splitmix64(seed ^ vocab_hash_));
        const double sigma = 1.0 / std::sqrt(static_cast<double>(width_));
        for (Eigen::Index i = 0; i < table_.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < width_; ++j) {
                table_.value(i, j) = static_cast<S>(sigma * rng.gaussian());
            }
        }
    }

    int width() const override { return width_; }
    std::uint64_t vocabulary_hash() const override { return vocab_hash_; }
    nn::Param<S>* trainable_table() override { return trainable_ ? &table_ : nullptr; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    int row_for_word(const std::string& word) const {
        if (auto it = index_.find(word); it != index_.end()) return it->second;
        return 1 + static_cast<int>(vocab_.size()) +
               static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(buckets_));
    }

    nn::Vec<S> encode_phrase(const std::string& phrase,
                             std::vector<std::pair<int, S>>* rows = nullptr) const override {
        // Whole-phrase vocabulary entry when present, otherwise the mean of
        // the word vectors.
        if (auto it = index_.find(phrase); it != index_.end()) {
            if (rows) rows->push_back({it->second, static_cast<S>(1)});
            return table_.value.row(it->second).transpose();
        }
        const auto words = detail::tokenize_words(phrase);
        if (words.empty()) throw ContractError("cannot encode empty phrase");
        nn::Vec<S> out = nn::Vec<S>::Zero(width_);
        const S w = static_cast<S>(1.0 / static_cast<double>(words.size()));
        for (const auto& word : words) {
            const int row = row_for_word(word);
            out += w * table_.value.row(row).transpose();
            if (rows) rows->push_back({row, w});
        }
        return out;
    }

    nn::Mat<S> encode_prompt(const std::string& prompt,
                             std::vector<int>* rows = nullptr) const override {
        if (prompt == kNullPrompt) return null_prompt(rows);
        const auto words = detail::tokenize_words(prompt);
        if (words.empty()) throw ContractError("cannot encode empty prompt");
        nn::Mat<S> out(static_cast<Eigen::Index>(words.size()), width_);
        for (std::size_t i = 0; i < words.size(); ++i) {
            const int row = row_for_word(words[i]);
            out.row(static_cast<Eigen::Index>(i)) = table_.value.row(row);
            if (rows) rows->push_back(row);
        }
        return out;
    }

    nn::Mat<S> null_prompt(std::vector<int>* rows = nullptr) const override {
        if (rows) rows->push_back(0);
        return table_.value.row(0);
    }

    // Fraction of vocabulary entries whose fallback bucket collides with
    // another entry's bucket; the closed vocabulary should hash apart.
    double bucket_collision_rate() const {
        std::vector<std::uint64_t> hashes;
        hashes.reserve(vocab_.size());
        for (const auto& w : vocab_) hashes.push_back(fnv1a64(w) % static_cast<std::uint64_t>(buckets_));
        std::vector<std::uint64_t> sorted = hashes;
        std::sort(sorted.begin(), sorted.end());
        long colliding = 0;
        for (const auto& h : hashes) {
            const auto lo = std::lower_bound(sorted.begin(), sorted.end(), h);
            const auto hi = std::upper_bound(sorted.begin(), sorted.end(), h);
            if (hi - lo > 1) ++colliding;
        }
        return vocab_.empty() ? 0.0 : static_cast<double>(colliding) / static_cast<double>(vocab_.size());
    }

private:
    int width_;
    int buckets_;
    bool trainable_;
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> index_;
    std::uint64_t vocab_hash_ = 0;
    nn::Param<S> table_;
};

// Frozen adapter around an arbitrary sentence-encoding callable.
template <class S>
class CallbackEncoder : public TextEncoder<S> {
public:
    using PhraseFn = std::function<nn::Vec<S>(const std::string&)>;

    CallbackEncoder(int width, PhraseFn fn, std::uint64_t id_hash)
        : width_(width), fn_(std::move(fn)), id_hash_(id_hash) {}

    int width() const override { return width_; }
    std::uint64_t vocabulary_hash() const override { return id_hash_; }

    nn::Vec<S> encode_phrase(const std::string& phrase,
                             std::vector<std::pair<int, S>>* rows = nullptr) const override {
        (void)rows;
        nn::Vec<S> v = fn_(phrase);
        if (v.size() != width_) throw ContractError("callback encoder produced wrong width");
        return v;
    }

    nn::Mat<S> encode_prompt(const std::string& prompt, std::vector<int>* rows = nullptr) const override {
        (void)rows;
        if (prompt == kNullPrompt) return null_prompt();
        const auto words = detail::tokenize_words(prompt);
        if (words.empty()) throw ContractError("cannot encode empty prompt");
        nn::Mat<S> out(static_cast<Eigen::Index>(words.size()), width_);
        for (std::size_t i = 0; i < words.size(); ++i) {
            out.row(static_cast<Eigen::Index>(i)) = encode_phrase(words[i]).transpose();
        }
        return out;
    }

    nn::Mat<S> null_prompt(std::vector<int>* rows = nullptr) const override {
        (void)rows;
        return nn::Mat<S>::Zero(1, width_);
    }

private:
    int width_;
    PhraseFn fn_;
    std::uint64_t id_hash_;
};

// Build the conditioning bundle parts for one layout.
template <class S>
PromptEncoding<S> encode(const std::string& prompt, const std::vector<std::string>& descriptions,
                         const TextEncoder<S>& provider) {
    PromptEncoding<S> enc;
    enc.is_null = (prompt == kNullPrompt);
    enc.prompt_tokens = provider.encode_prompt(prompt, &enc.prompt_rows);
    enc.desc_vectors.resize(static_cast<Eigen::Index>(descriptions.size()), provider.width());
    enc.desc_rows.resize(descriptions.size());
    for (std::size_t i = 0; i < descriptions.size(); ++i) {
        enc.desc_vectors.row(static_cast<Eigen::Index>(i)) =
            provider.encode_phrase(descriptions[i], &enc.desc_rows[i]).transpose();
    }
    return enc;
}

template <class S>
std::shared_ptr<TextEncoder<S>> make_encoder(const std::string& provider_id,
                                             std::vector<std::string> vocabulary, int width,
                                             int buckets = 1 << 16, std::uint64_t seed = 7) {
    if (provider_id == "vocab") {
        return std::make_shared<VocabEmbedding<S>>(std::move(vocabulary), width, buckets, seed, true);
    }
    if (provider_id == "vocab_frozen") {
        return std::make_shared<VocabEmbedding<S>>(std::move(vocabulary), width, buckets, seed, false);
    }
    throw ConfigError("unknown embedding provider '" + provider_id + "'");
}

}  // namespace layoutdiff
