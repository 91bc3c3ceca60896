#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layoutdiff/embedding.hpp"
#include "layoutdiff/errors.hpp"
#include "layoutdiff/nn.hpp"
#include "layoutdiff/rng.hpp"

namespace layoutdiff {

struct LDiTConfig {
    int layers = 8;
    int heads = 8;
    int d_model = 256;
    int n_max = 16;      // padded object capacity
    int cond_dim = 256;  // scalar-condition embedding width
    int ffn_mult = 4;
    int embed_width = 64;  // text-encoder vector width
    bool cross_attention = true;
    bool description_modulation = true;

    void validate() const {
        if (layers < 1 || heads < 1 || d_model < heads || n_max < 1 || cond_dim < 2 ||
            embed_width < 1 || ffn_mult < 1) {
            throw ConfigError("invalid LDiT configuration");
        }
        if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    }

    bool operator==(const LDiTConfig& o) const {
        return layers == o.layers && heads == o.heads && d_model == o.d_model && n_max == o.n_max &&
               cond_dim == o.cond_dim && ffn_mult == o.ffn_mult && embed_width == o.embed_width &&
               cross_attention == o.cross_attention &&
               description_modulation == o.description_modulation;
    }

    nlohmann::json to_json() const {
        return {{"layers", layers},
                {"heads", heads},
                {"d_model", d_model},
                {"n_max", n_max},
                {"cond_dim", cond_dim},
                {"ffn_mult", ffn_mult},
                {"embed_width", embed_width},
                {"cross_attention", cross_attention},
                {"description_modulation", description_modulation}};
    }

    static LDiTConfig from_json(const nlohmann::json& j) {
        LDiTConfig cfg;
        cfg.layers = j.at("layers").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.n_max = j.at("n_max").get<int>();
        cfg.cond_dim = j.at("cond_dim").get<int>();
        cfg.ffn_mult = j.at("ffn_mult").get<int>();
        cfg.embed_width = j.at("embed_width").get<int>();
        cfg.cross_attention = j.at("cross_attention").get<bool>();
        cfg.description_modulation = j.at("description_modulation").get<bool>();
        return cfg;
    }
};

// Everything the denoiser is conditioned on for one layout.
template <class S>
struct ConditionBundle {
    PromptEncoding<S> encoding;
    std::vector<bool> mask;  // n_max entries
    int valid_count = 0;
    double aspect_ratio = 1.0;
};

template <class S>
ConditionBundle<S> make_bundle(const std::string& prompt, const std::vector<std::string>& descriptions,
                               const TextEncoder<S>& encoder, int n_max, double aspect_ratio) {
    if (static_cast<int>(descriptions.size()) > n_max) {
        throw ContractError("description list exceeds object capacity of " + std::to_string(n_max));
    }
    if (!(aspect_ratio > 0.0) || !std::isfinite(aspect_ratio)) {
        throw ContractError("aspect ratio must be positive and finite");
    }
    ConditionBundle<S> bundle;
    bundle.encoding = encode<S>(prompt, descriptions, encoder);
    bundle.mask.assign(static_cast<std::size_t>(n_max), false);
    for (std::size_t i = 0; i < descriptions.size(); ++i) bundle.mask[i] = true;
    bundle.valid_count = static_cast<int>(descriptions.size());
    bundle.aspect_ratio = aspect_ratio;
    return bundle;
}

template <class S>
ConditionBundle<S> with_null_prompt(const ConditionBundle<S>& bundle, const TextEncoder<S>& encoder) {
    ConditionBundle<S> out = bundle;
    out.encoding.prompt_rows.clear();
    out.encoding.prompt_tokens = encoder.null_prompt(&out.encoding.prompt_rows);
    out.encoding.is_null = true;
    return out;
}

// One denoiser input: noised boxes in normalized space plus conditioning.
template <class S>
struct BatchItem {
    nn::Mat<S> boxes;  // n_max x 4
    const ConditionBundle<S>* cond = nullptr;
    int t = 1;
};

// Per-object token pair produced by the input embedders.
template <class S>
struct TokenState {
    nn::Mat<S> desc_tokens;  // n_max x d_model
    nn::Mat<S> box_tokens;   // n_max x d_model
    std::vector<bool> mask;
};

template <class S>
struct LDiTWorkspace {
    int batch = 0;
    const std::vector<BatchItem<S>>* items = nullptr;
    std::vector<bool> key_valid;  // batch * 2 * n_max
    std::vector<nn::AttnSpan> self_spans;
    std::vector<nn::AttnSpan> cross_spans;

    nn::Mat<S> desc_in, box_in;
    nn::Mat<S> desc_h_pre, desc_h_act, box_h_pre, box_h_act;
    nn::Mat<S> prompt_in;
    std::vector<Eigen::Index> prompt_offsets;
    nn::Mat<S> prompt_tokens;

    nn::Mat<S> t_feat, r_feat;
    nn::Mat<S> t_h_pre, t_h_act, r_h_pre, r_h_act;
    nn::Mat<S> cond, cond_silu;

    struct BlockCache {
        nn::Mat<S> mod;  // batch x 9*d
        nn::LayerNormCache<S> ln1_d, ln1_b, ln2_d, ln2_b, ln3_d, ln3_b;
        nn::AttentionCache<S> self_cache;
        nn::Mat<S> a1;
        nn::AttentionCache<S> cross_cache;
        nn::Mat<S> a2;
        nn::Mat<S> dm3, bm3;
        nn::Mat<S> hd_pre, hd_act, hb_pre, hb_act;
        nn::Mat<S> d_out_ffn, b_out_ffn;
    };
    std::vector<BlockCache> blocks;

    nn::LayerNormCache<S> ln_final;
    nn::Mat<S> final_mod_out;  // batch x 2*d
    nn::Mat<S> bm_final;
};

// Denoiser over bounding-box tokens: per-object description and box tokens
// are concatenated along the token axis, run through masked self-attention,
// cross-attention into the prompt tokens, then separated into per-stream
// feed-forwards; every sublayer is wrapped in shift/scale/gate modulation
// derived from the timestep and aspect-ratio embeddings. There is no
// positional encoding over objects, so the model is permutation-equivariant
// by construction; stream identity comes from a learned 2-way segment
// embedding.
template <class S>
class LDiT {
public:
    enum class Init { adaln_zero, random_all };

    // Frequency multiplier applied to log(aspect) before the sinusoidal
    // embedding, spreading the narrow log-aspect range over the ladder.
    static constexpr double kAspectLogScale = 50.0;

    LDiT(LDiTConfig cfg, std::shared_ptr<TextEncoder<S>> encoder)
        : cfg_(cfg), encoder_(std::move(encoder)) {
        cfg_.validate();
        if (!encoder_) throw ConfigError("LDiT requires a text encoder");
        if (encoder_->width() != cfg_.embed_width) {
            throw ConfigError("encoder width " + std::to_string(encoder_->width()) +
                              " does not match config embed_width " + std::to_string(cfg_.embed_width));
        }
        const int d = cfg_.d_model;
        box_in1_.setup("box_embed.fc1", 4, d);
        box_in2_.setup("box_embed.fc2", d, d);
        desc_in1_.setup("desc_embed.fc1", cfg_.embed_width, d);
        desc_in2_.setup("desc_embed.fc2", d, d);
        seg_.name = "segment_embed";
        seg_.resize(2, d);
        prompt_proj_.setup("prompt_proj", cfg_.embed_width, d);
        t_mlp1_.setup("t_embed.fc1", cfg_.cond_dim, cfg_.cond_dim);
        t_mlp2_.setup("t_embed.fc2", cfg_.cond_dim, cfg_.cond_dim);
        r_mlp1_.setup("r_embed.fc1", cfg_.cond_dim, cfg_.cond_dim);
        r_mlp2_.setup("r_embed.fc2", cfg_.cond_dim, cfg_.cond_dim);
        blocks_.resize(static_cast<std::size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            Block& blk = blocks_[static_cast<std::size_t>(l)];
            const std::string prefix = "block" + std::to_string(l);
            blk.mod.setup(prefix + ".mod", cfg_.cond_dim, 9 * d);
            blk.self_attn.setup(prefix + ".self_attn", d, cfg_.heads);
            if (cfg_.cross_attention) blk.cross_attn.setup(prefix + ".cross_attn", d, cfg_.heads);
            blk.ffn_d1.setup(prefix + ".ffn_desc.fc1", d, cfg_.ffn_mult * d);
            blk.ffn_d2.setup(prefix + ".ffn_desc.fc2", cfg_.ffn_mult * d, d);
            blk.ffn_b1.setup(prefix + ".ffn_box.fc1", d, cfg_.ffn_mult * d);
            blk.ffn_b2.setup(prefix + ".ffn_box.fc2", cfg_.ffn_mult * d, d);
        }
        final_mod_.setup("final.mod", cfg_.cond_dim, 2 * d);
        head_.setup("final.head", d, 4);

        collect_params();
    }

    LDiT(const LDiT&) = delete;
    LDiT& operator=(const LDiT&) = delete;

    void init_weights(std::uint64_t seed, Init mode = Init::adaln_zero) {
        Rng rng(splitmix64(seed ^ 0x1d17ULL));
        auto init_linear = [&](nn::Linear<S>& lin) {
            lin.init_xavier(rng);
            const double bound = 1.0 / std::sqrt(static_cast<double>(lin.weight.value.rows()));
            for (Eigen::Index j = 0; j < lin.bias.value.cols(); ++j) {
                lin.bias.value(0, j) = static_cast<S>(rng.uniform(-bound, bound));
            }
        };
        init_linear(box_in1_);
        init_linear(box_in2_);
        init_linear(desc_in1_);
        init_linear(desc_in2_);
        init_linear(prompt_proj_);
        init_linear(t_mlp1_);
        init_linear(t_mlp2_);
        init_linear(r_mlp1_);
        init_linear(r_mlp2_);
        for (Eigen::Index i = 0; i < seg_.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < seg_.value.cols(); ++j) {
                seg_.value(i, j) = static_cast<S>(0.02 * rng.gaussian());
            }
        }
        for (Block& blk : blocks_) {
            blk.self_attn.init_xavier(rng);
            if (cfg_.cross_attention) blk.cross_attn.init_xavier(rng);
            init_linear(blk.ffn_d1);
            init_linear(blk.ffn_d2);
            init_linear(blk.ffn_b1);
            init_linear(blk.ffn_b2);
            if (mode == Init::adaln_zero) {
                blk.mod.weight.value.setZero();
                blk.mod.bias.value.setZero();
            } else {
                init_linear(blk.mod);
            }
        }
        if (mode == Init::adaln_zero) {
            final_mod_.weight.value.setZero();
            final_mod_.bias.value.setZero();
            head_.weight.value.setZero();
            head_.bias.value.setZero();
        } else {
            init_linear(final_mod_);
            init_linear(head_);
        }
    }

    const LDiTConfig& config() const { return cfg_; }
    const std::shared_ptr<TextEncoder<S>>& encoder() const { return encoder_; }

    nn::ParamRefs<S>& parameters() { return params_; }
    const nn::ParamRefs<S>& parameters() const { return params_; }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    // Denoiser parameter count; the text-encoder table is reported separately.
    long param_count(bool include_encoder = false) const {
        long total = 0;
        for (const auto* p : params_) {
            const bool is_encoder = p->name.rfind("encoder.", 0) == 0;
            if (is_encoder && !include_encoder) continue;
            total += p->size();
        }
        return total;
    }

    // Input embedders alone; used by tests and by the forward pass.
    TokenState<S> embed_inputs(const nn::Mat<S>& boxes, const ConditionBundle<S>& cond) const {
        validate_item(boxes, cond);
        const int n = cfg_.n_max;
        TokenState<S> state;
        state.mask = cond.mask;
        nn::Mat<S> desc_in = nn::Mat<S>::Zero(n, cfg_.embed_width);
        for (int i = 0; i < cond.valid_count; ++i) {
            desc_in.row(i) = cond.encoding.desc_vectors.row(i);
        }
        state.desc_tokens = desc_in2_.forward(nn::silu(desc_in1_.forward(desc_in)));
        state.desc_tokens.rowwise() += seg_.value.row(0);
        state.box_tokens = nn::silu(box_in1_.forward(boxes));
        state.box_tokens = box_in2_.forward(state.box_tokens);
        state.box_tokens.rowwise() += seg_.value.row(1);
        for (int i = 0; i < n; ++i) {
            if (!cond.mask[static_cast<std::size_t>(i)]) {
                state.desc_tokens.row(i).setZero();
                state.box_tokens.row(i).setZero();
            }
        }
        return state;
    }

    // Batched noise prediction. Returns (batch * n_max) x 4; masked rows are
    // defined but carry no meaning. The workspace keeps every activation the
    // backward pass needs; `items` must stay alive until backward() is done.
    nn::Mat<S> forward(const std::vector<BatchItem<S>>& items, LDiTWorkspace<S>& ws) const {
        const int b_count = static_cast<int>(items.size());
        if (b_count == 0) throw ContractError("empty batch");
        const int n = cfg_.n_max;
        const int d = cfg_.d_model;
        const Eigen::Index bn = static_cast<Eigen::Index>(b_count) * n;
        ws.batch = b_count;
        ws.items = &items;

        // ---- gather inputs -------------------------------------------------
        ws.desc_in = nn::Mat<S>::Zero(bn, cfg_.embed_width);
        ws.box_in = nn::Mat<S>::Zero(bn, 4);
        ws.key_valid.assign(static_cast<std::size_t>(b_count) * 2 * n, false);
        ws.self_spans.resize(static_cast<std::size_t>(b_count));
        ws.cross_spans.resize(static_cast<std::size_t>(b_count));
        ws.prompt_offsets.assign(static_cast<std::size_t>(b_count) + 1, 0);
        Eigen::Index prompt_total = 0;
        for (int b = 0; b < b_count; ++b) {
            const BatchItem<S>& item = items[static_cast<std::size_t>(b)];
            validate_item(item.boxes, *item.cond);
            ws.box_in.middleRows(static_cast<Eigen::Index>(b) * n, n) = item.boxes;
            for (int i = 0; i < item.cond->valid_count; ++i) {
                ws.desc_in.row(static_cast<Eigen::Index>(b) * n + i) =
                    item.cond->encoding.desc_vectors.row(i);
            }
            for (int i = 0; i < n; ++i) {
                const bool valid = item.cond->mask[static_cast<std::size_t>(i)];
                ws.key_valid[static_cast<std::size_t>(b) * 2 * n + static_cast<std::size_t>(i)] = valid;
                ws.key_valid[static_cast<std::size_t>(b) * 2 * n + static_cast<std::size_t>(n + i)] =
                    valid;
            }
            ws.self_spans[static_cast<std::size_t>(b)] = {static_cast<Eigen::Index>(b) * 2 * n, 2 * n,
                                                          static_cast<Eigen::Index>(b) * 2 * n, 2 * n};
            ws.prompt_offsets[static_cast<std::size_t>(b)] = prompt_total;
            prompt_total += item.cond->encoding.prompt_tokens.rows();
        }
        ws.prompt_offsets[static_cast<std::size_t>(b_count)] = prompt_total;
        ws.prompt_in.resize(prompt_total, cfg_.embed_width);
        for (int b = 0; b < b_count; ++b) {
            const auto& tokens = items[static_cast<std::size_t>(b)].cond->encoding.prompt_tokens;
            ws.prompt_in.middleRows(ws.prompt_offsets[static_cast<std::size_t>(b)], tokens.rows()) =
                tokens;
            ws.cross_spans[static_cast<std::size_t>(b)] = {
                static_cast<Eigen::Index>(b) * 2 * n, 2 * n,
                ws.prompt_offsets[static_cast<std::size_t>(b)], tokens.rows()};
        }

        // ---- input embedders ----------------------------------------------
        ws.desc_h_pre = desc_in1_.forward(ws.desc_in);
        ws.desc_h_act = nn::silu(ws.desc_h_pre);
        nn::Mat<S> d_state = desc_in2_.forward(ws.desc_h_act);
        d_state.rowwise() += seg_.value.row(0);
        ws.box_h_pre = box_in1_.forward(ws.box_in);
        ws.box_h_act = nn::silu(ws.box_h_pre);
        nn::Mat<S> b_state = box_in2_.forward(ws.box_h_act);
        b_state.rowwise() += seg_.value.row(1);
        mask_rows(d_state, items, n);
        mask_rows(b_state, items, n);
        ws.prompt_tokens = prompt_proj_.forward(ws.prompt_in);

        // ---- scalar conditions ----------------------------------------------
        ws.t_feat.resize(b_count, cfg_.cond_dim);
        ws.r_feat.resize(b_count, cfg_.cond_dim);
        for (int b = 0; b < b_count; ++b) {
            const BatchItem<S>& item = items[static_cast<std::size_t>(b)];
            ws.t_feat.row(b) = nn::sinusoidal_embedding<S>(static_cast<double>(item.t), cfg_.cond_dim);
            ws.r_feat.row(b) = nn::sinusoidal_embedding<S>(
                std::log(item.cond->aspect_ratio) * kAspectLogScale, cfg_.cond_dim);
        }
        ws.t_h_pre = t_mlp1_.forward(ws.t_feat);
        ws.t_h_act = nn::silu(ws.t_h_pre);
        ws.r_h_pre = r_mlp1_.forward(ws.r_feat);
        ws.r_h_act = nn::silu(ws.r_h_pre);
        ws.cond = t_mlp2_.forward(ws.t_h_act) + r_mlp2_.forward(ws.r_h_act);
        ws.cond_silu = nn::silu(ws.cond);

        // ---- transformer blocks ---------------------------------------------
        ws.blocks.resize(blocks_.size());
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            run_block_forward(blocks_[l], ws, ws.blocks[l], d_state, b_state);
        }

        // ---- prediction head ------------------------------------------------
        nn::Mat<S> bn_final = nn::layer_norm(b_state, ws.ln_final);
        ws.final_mod_out = final_mod_.forward(ws.cond_silu);
        ws.bm_final.resize(bn, d);
        for (int b = 0; b < b_count; ++b) {
            const auto shift = ws.final_mod_out.row(b).segment(0, d);
            const auto scale = ws.final_mod_out.row(b).segment(d, d);
            auto rows = ws.bm_final.middleRows(static_cast<Eigen::Index>(b) * n, n);
            rows = bn_final.middleRows(static_cast<Eigen::Index>(b) * n, n);
            rows.array().rowwise() *= (scale.array() + 1).eval();
            rows.array().rowwise() += shift.array();
        }
        return head_.forward(ws.bm_final);
    }

    // Single-sample noise prediction.
    nn::Mat<S> predict_noise(const nn::Mat<S>& boxes, const ConditionBundle<S>& cond, int t) const {
        std::vector<BatchItem<S>> items(1);
        items[0].boxes = boxes;
        items[0].cond = &cond;
        items[0].t = t;
        LDiTWorkspace<S> ws;
        return forward(items, ws);
    }

    // Accumulates gradients for every parameter (and the encoder table when
    // trainable) given the gradient of the loss w.r.t. the forward output.
    void backward(const nn::Mat<S>& grad_pred, LDiTWorkspace<S>& ws) {
        const int b_count = ws.batch;
        const int n = cfg_.n_max;
        const int d = cfg_.d_model;
        const std::vector<BatchItem<S>>& items = *ws.items;

        nn::Mat<S> g_cond_silu = nn::Mat<S>::Zero(b_count, cfg_.cond_dim);

        // head
        nn::Mat<S> g_bm = head_.backward(ws.bm_final, grad_pred);
        nn::Mat<S> g_final_mod = nn::Mat<S>::Zero(b_count, 2 * d);
        nn::Mat<S> g_bn_final(g_bm.rows(), d);
        for (int b = 0; b < b_count; ++b) {
            const auto scale = ws.final_mod_out.row(b).segment(d, d);
            const auto rows = g_bm.middleRows(static_cast<Eigen::Index>(b) * n, n);
            const auto xn = ws.ln_final.xhat.middleRows(static_cast<Eigen::Index>(b) * n, n);
            g_final_mod.row(b).segment(0, d) = rows.colwise().sum();
            g_final_mod.row(b).segment(d, d) = (rows.array() * xn.array()).colwise().sum();
            g_bn_final.middleRows(static_cast<Eigen::Index>(b) * n, n) =
                (rows.array().rowwise() * (scale.array() + 1)).matrix();
        }
        g_cond_silu += final_mod_.backward(ws.cond_silu, g_final_mod);
        nn::Mat<S> g_b_state = nn::layer_norm_backward(ws.ln_final, g_bn_final);
        nn::Mat<S> g_d_state = nn::Mat<S>::Zero(g_b_state.rows(), d);
        nn::Mat<S> g_prompt = nn::Mat<S>::Zero(ws.prompt_tokens.rows(), d);

        for (std::size_t l = blocks_.size(); l-- > 0;) {
            run_block_backward(blocks_[l], ws, ws.blocks[l], g_d_state, g_b_state, g_prompt,
                               g_cond_silu);
        }

        // scalar-condition embedders
        nn::Mat<S> g_cond = nn::silu_backward(ws.cond, g_cond_silu);
        nn::Mat<S> g_t_act = t_mlp2_.backward(ws.t_h_act, g_cond);
        t_mlp1_.backward(ws.t_feat, nn::silu_backward(ws.t_h_pre, g_t_act));
        nn::Mat<S> g_r_act = r_mlp2_.backward(ws.r_h_act, g_cond);
        r_mlp1_.backward(ws.r_feat, nn::silu_backward(ws.r_h_pre, g_r_act));

        // input embedders
        mask_rows(g_d_state, items, n);
        mask_rows(g_b_state, items, n);
        for (int b = 0; b < b_count; ++b) {
            seg_.grad.row(0) +=
                g_d_state.middleRows(static_cast<Eigen::Index>(b) * n, n).colwise().sum();
            seg_.grad.row(1) +=
                g_b_state.middleRows(static_cast<Eigen::Index>(b) * n, n).colwise().sum();
        }
        nn::Mat<S> g_desc_act = desc_in2_.backward(ws.desc_h_act, g_d_state);
        nn::Mat<S> g_desc_in = desc_in1_.backward(ws.desc_in, nn::silu_backward(ws.desc_h_pre, g_desc_act));
        nn::Mat<S> g_box_act = box_in2_.backward(ws.box_h_act, g_b_state);
        box_in1_.backward(ws.box_in, nn::silu_backward(ws.box_h_pre, g_box_act));
        nn::Mat<S> g_prompt_in = prompt_proj_.backward(ws.prompt_in, g_prompt);

        // scatter text gradients into the encoder table when it trains
        nn::Param<S>* table = encoder_->trainable_table();
        if (table) {
            for (int b = 0; b < b_count; ++b) {
                const BatchItem<S>& item = items[static_cast<std::size_t>(b)];
                const auto& enc = item.cond->encoding;
                for (std::size_t tok = 0; tok < enc.prompt_rows.size(); ++tok) {
                    table->grad.row(enc.prompt_rows[tok]) +=
                        g_prompt_in.row(ws.prompt_offsets[static_cast<std::size_t>(b)] +
                                        static_cast<Eigen::Index>(tok));
                }
                for (int i = 0; i < item.cond->valid_count; ++i) {
                    for (const auto& [row, weight] : enc.desc_rows[static_cast<std::size_t>(i)]) {
                        table->grad.row(row) +=
                            weight * g_desc_in.row(static_cast<Eigen::Index>(b) * n + i);
                    }
                }
            }
        }
    }

private:
    struct Block {
        nn::Linear<S> mod;
        nn::MultiheadAttention<S> self_attn;
        nn::MultiheadAttention<S> cross_attn;
        nn::Linear<S> ffn_d1, ffn_d2, ffn_b1, ffn_b2;
    };

    void collect_params() {
        params_.clear();
        box_in1_.collect(params_);
        box_in2_.collect(params_);
        desc_in1_.collect(params_);
        desc_in2_.collect(params_);
        params_.push_back(&seg_);
        prompt_proj_.collect(params_);
        t_mlp1_.collect(params_);
        t_mlp2_.collect(params_);
        r_mlp1_.collect(params_);
        r_mlp2_.collect(params_);
        for (Block& blk : blocks_) {
            blk.mod.collect(params_);
            blk.self_attn.collect(params_);
            if (cfg_.cross_attention) blk.cross_attn.collect(params_);
            blk.ffn_d1.collect(params_);
            blk.ffn_d2.collect(params_);
            blk.ffn_b1.collect(params_);
            blk.ffn_b2.collect(params_);
        }
        final_mod_.collect(params_);
        head_.collect(params_);
        if (encoder_) {
            if (nn::Param<S>* table = encoder_->trainable_table()) params_.push_back(table);
        }
    }

    void validate_item(const nn::Mat<S>& boxes, const ConditionBundle<S>& cond) const {
        if (boxes.rows() != cfg_.n_max || boxes.cols() != 4) {
            throw ContractError("boxes must be n_max x 4");
        }
        if (static_cast<int>(cond.mask.size()) != cfg_.n_max) {
            throw ContractError("mask length must equal n_max");
        }
        int valid = 0;
        for (const bool m : cond.mask) valid += m ? 1 : 0;
        if (valid != cond.valid_count) throw ContractError("mask does not match valid_count");
        if (cond.encoding.desc_vectors.rows() < cond.valid_count) {
            throw ContractError("fewer description embeddings than valid objects");
        }
        if (cond.encoding.desc_vectors.cols() != cfg_.embed_width ||
            cond.encoding.prompt_tokens.cols() != cfg_.embed_width) {
            throw ContractError("encoding width does not match model embed_width");
        }
        if (cond.encoding.prompt_tokens.rows() < 1) {
            throw ContractError("prompt encoding must contain at least one token");
        }
    }

    static void mask_rows(nn::Mat<S>& state, const std::vector<BatchItem<S>>& items, int n) {
        for (std::size_t b = 0; b < items.size(); ++b) {
            for (int i = 0; i < n; ++i) {
                if (!items[b].cond->mask[static_cast<std::size_t>(i)]) {
                    state.row(static_cast<Eigen::Index>(b) * n + i).setZero();
                }
            }
        }
    }

    // Chunk indices into the 9*d modulation vector.
    enum ModChunk { kSaShift = 0, kSaScale, kSaGate, kCaShift, kCaScale, kCaGate, kFfShift, kFfScale, kFfGate };

    void run_block_forward(const Block& blk, LDiTWorkspace<S>& ws,
                           typename LDiTWorkspace<S>::BlockCache& cache, nn::Mat<S>& d_state,
                           nn::Mat<S>& b_state) const {
        const int b_count = ws.batch;
        const int n = cfg_.n_max;
        const int d = cfg_.d_model;
        const bool mod_desc = cfg_.description_modulation;
        cache.mod = blk.mod.forward(ws.cond_silu);

        auto chunk = [&](int b, ModChunk c) { return cache.mod.row(b).segment(c * d, d); };

        // self-attention over the concatenated token sequence
        nn::Mat<S> dn = nn::layer_norm(d_state, cache.ln1_d);
        nn::Mat<S> bn = nn::layer_norm(b_state, cache.ln1_b);
        nn::Mat<S> xq(static_cast<Eigen::Index>(b_count) * 2 * n, d);
        for (int b = 0; b < b_count; ++b) {
            auto dst_d = xq.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            auto dst_b = xq.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
            dst_d = dn.middleRows(static_cast<Eigen::Index>(b) * n, n);
            if (mod_desc) {
                dst_d.array().rowwise() *= (chunk(b, kSaScale).array() + 1).eval();
                dst_d.array().rowwise() += chunk(b, kSaShift).array();
            }
            dst_b = bn.middleRows(static_cast<Eigen::Index>(b) * n, n);
            dst_b.array().rowwise() *= (chunk(b, kSaScale).array() + 1).eval();
            dst_b.array().rowwise() += chunk(b, kSaShift).array();
        }
        cache.a1 = blk.self_attn.forward(xq, xq, ws.self_spans, &ws.key_valid, cache.self_cache);
        add_gated(d_state, b_state, cache.a1, cache.mod, kSaGate, mod_desc, b_count, n, d);

        // cross-attention into the prompt tokens
        if (cfg_.cross_attention) {
            nn::Mat<S> dn2 = nn::layer_norm(d_state, cache.ln2_d);
            nn::Mat<S> bn2 = nn::layer_norm(b_state, cache.ln2_b);
            nn::Mat<S> xq2(static_cast<Eigen::Index>(b_count) * 2 * n, d);
            for (int b = 0; b < b_count; ++b) {
                auto dst_d = xq2.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
                auto dst_b = xq2.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
                dst_d = dn2.middleRows(static_cast<Eigen::Index>(b) * n, n);
                if (mod_desc) {
                    dst_d.array().rowwise() *= (chunk(b, kCaScale).array() + 1).eval();
                    dst_d.array().rowwise() += chunk(b, kCaShift).array();
                }
                dst_b = bn2.middleRows(static_cast<Eigen::Index>(b) * n, n);
                dst_b.array().rowwise() *= (chunk(b, kCaScale).array() + 1).eval();
                dst_b.array().rowwise() += chunk(b, kCaShift).array();
            }
            cache.a2 = blk.cross_attn.forward(xq2, ws.prompt_tokens, ws.cross_spans, nullptr,
                                              cache.cross_cache);
            add_gated(d_state, b_state, cache.a2, cache.mod, kCaGate, mod_desc, b_count, n, d);
        }

        // per-stream feed-forward
        nn::Mat<S> dn3 = nn::layer_norm(d_state, cache.ln3_d);
        nn::Mat<S> bn3 = nn::layer_norm(b_state, cache.ln3_b);
        cache.dm3 = dn3;
        cache.bm3 = bn3;
        for (int b = 0; b < b_count; ++b) {
            auto rows_d = cache.dm3.middleRows(static_cast<Eigen::Index>(b) * n, n);
            if (mod_desc) {
                rows_d.array().rowwise() *= (chunk(b, kFfScale).array() + 1).eval();
                rows_d.array().rowwise() += chunk(b, kFfShift).array();
            }
            auto rows_b = cache.bm3.middleRows(static_cast<Eigen::Index>(b) * n, n);
            rows_b.array().rowwise() *= (chunk(b, kFfScale).array() + 1).eval();
            rows_b.array().rowwise() += chunk(b, kFfShift).array();
        }
        cache.hd_pre = blk.ffn_d1.forward(cache.dm3);
        cache.hd_act = nn::gelu(cache.hd_pre);
        cache.d_out_ffn = blk.ffn_d2.forward(cache.hd_act);
        cache.hb_pre = blk.ffn_b1.forward(cache.bm3);
        cache.hb_act = nn::gelu(cache.hb_pre);
        cache.b_out_ffn = blk.ffn_b2.forward(cache.hb_act);
        for (int b = 0; b < b_count; ++b) {
            auto d_rows = d_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            const auto d_add = cache.d_out_ffn.middleRows(static_cast<Eigen::Index>(b) * n, n);
            if (mod_desc) {
                d_rows.array() += d_add.array().rowwise() * chunk(b, kFfGate).array();
            } else {
                d_rows += d_add;
            }
            auto b_rows = b_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            b_rows.array() += cache.b_out_ffn.middleRows(static_cast<Eigen::Index>(b) * n, n)
                                  .array()
                                  .rowwise() *
                              chunk(b, kFfGate).array();
        }
    }

    void run_block_backward(Block& blk, LDiTWorkspace<S>& ws,
                            typename LDiTWorkspace<S>::BlockCache& cache, nn::Mat<S>& g_d_state,
                            nn::Mat<S>& g_b_state, nn::Mat<S>& g_prompt, nn::Mat<S>& g_cond_silu) {
        const int b_count = ws.batch;
        const int n = cfg_.n_max;
        const int d = cfg_.d_model;
        const bool mod_desc = cfg_.description_modulation;
        nn::Mat<S> g_mod = nn::Mat<S>::Zero(b_count, 9 * d);
        auto chunk = [&](int b, ModChunk c) { return cache.mod.row(b).segment(c * d, d); };
        auto g_chunk = [&](int b, ModChunk c) { return g_mod.row(b).segment(c * d, d); };

        // feed-forward backward
        {
            nn::Mat<S> g_do(g_d_state.rows(), d), g_bo(g_b_state.rows(), d);
            for (int b = 0; b < b_count; ++b) {
                const auto gd = g_d_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
                const auto gb = g_b_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
                const auto d_out = cache.d_out_ffn.middleRows(static_cast<Eigen::Index>(b) * n, n);
                const auto b_out = cache.b_out_ffn.middleRows(static_cast<Eigen::Index>(b) * n, n);
                if (mod_desc) {
                    g_chunk(b, kFfGate) += (gd.array() * d_out.array()).colwise().sum().matrix() +
                                           (gb.array() * b_out.array()).colwise().sum().matrix();
                    g_do.middleRows(static_cast<Eigen::Index>(b) * n, n) =
                        (gd.array().rowwise() * chunk(b, kFfGate).array()).matrix();
                } else {
                    g_chunk(b, kFfGate) += (gb.array() * b_out.array()).colwise().sum().matrix();
                    g_do.middleRows(static_cast<Eigen::Index>(b) * n, n) = gd;
                }
                g_bo.middleRows(static_cast<Eigen::Index>(b) * n, n) =
                    (gb.array().rowwise() * chunk(b, kFfGate).array()).matrix();
            }
            nn::Mat<S> g_hd = blk.ffn_d2.backward(cache.hd_act, g_do);
            nn::Mat<S> g_dm3 = blk.ffn_d1.backward(cache.dm3, nn::gelu_backward(cache.hd_pre, g_hd));
            nn::Mat<S> g_hb = blk.ffn_b2.backward(cache.hb_act, g_bo);
            nn::Mat<S> g_bm3 = blk.ffn_b1.backward(cache.bm3, nn::gelu_backward(cache.hb_pre, g_hb));
            // un-modulate; dn3/bn3 are the layer-norm outputs stored as xhat
            for (int b = 0; b < b_count; ++b) {
                auto g_rows_d = g_dm3.middleRows(static_cast<Eigen::Index>(b) * n, n);
                const auto xn_d = cache.ln3_d.xhat.middleRows(static_cast<Eigen::Index>(b) * n, n);
                if (mod_desc) {
                    g_chunk(b, kFfShift) += g_rows_d.colwise().sum();
                    g_chunk(b, kFfScale) += (g_rows_d.array() * xn_d.array()).colwise().sum().matrix();
                    g_rows_d = (g_rows_d.array().rowwise() * (chunk(b, kFfScale).array() + 1)).matrix();
                }
                auto g_rows_b = g_bm3.middleRows(static_cast<Eigen::Index>(b) * n, n);
                const auto xn_b = cache.ln3_b.xhat.middleRows(static_cast<Eigen::Index>(b) * n, n);
                g_chunk(b, kFfShift) += g_rows_b.colwise().sum();
                g_chunk(b, kFfScale) += (g_rows_b.array() * xn_b.array()).colwise().sum().matrix();
                g_rows_b = (g_rows_b.array().rowwise() * (chunk(b, kFfScale).array() + 1)).matrix();
            }
            g_d_state += nn::layer_norm_backward(cache.ln3_d, g_dm3);
            g_b_state += nn::layer_norm_backward(cache.ln3_b, g_bm3);
        }

        // cross-attention backward
        if (cfg_.cross_attention) {
            nn::Mat<S> g_a2(static_cast<Eigen::Index>(b_count) * 2 * n, d);
            gated_grad(g_a2, g_d_state, g_b_state, cache.a2, cache.mod, g_mod, kCaGate, mod_desc,
                       b_count, n, d);
            auto [g_xq2, g_kv] = blk.cross_attn.backward(cache.cross_cache, g_a2);
            g_prompt += g_kv;
            unmodulate_concat(g_xq2, cache.ln2_d, cache.ln2_b, cache.mod, g_mod, kCaShift, kCaScale,
                              mod_desc, b_count, n, d);
            nn::Mat<S> g_dn2(static_cast<Eigen::Index>(b_count) * n, d),
                g_bn2(static_cast<Eigen::Index>(b_count) * n, d);
            split_concat(g_xq2, g_dn2, g_bn2, b_count, n);
            g_d_state += nn::layer_norm_backward(cache.ln2_d, g_dn2);
            g_b_state += nn::layer_norm_backward(cache.ln2_b, g_bn2);
        }

        // self-attention backward
        {
            nn::Mat<S> g_a1(static_cast<Eigen::Index>(b_count) * 2 * n, d);
            gated_grad(g_a1, g_d_state, g_b_state, cache.a1, cache.mod, g_mod, kSaGate, mod_desc,
                       b_count, n, d);
            auto [g_xq1, g_xkv1] = blk.self_attn.backward(cache.self_cache, g_a1);
            g_xq1 += g_xkv1;  // same matrix fed both roles
            unmodulate_concat(g_xq1, cache.ln1_d, cache.ln1_b, cache.mod, g_mod, kSaShift, kSaScale,
                              mod_desc, b_count, n, d);
            nn::Mat<S> g_dn(static_cast<Eigen::Index>(b_count) * n, d),
                g_bn(static_cast<Eigen::Index>(b_count) * n, d);
            split_concat(g_xq1, g_dn, g_bn, b_count, n);
            g_d_state += nn::layer_norm_backward(cache.ln1_d, g_dn);
            g_b_state += nn::layer_norm_backward(cache.ln1_b, g_bn);
        }

        g_cond_silu += blk.mod.backward(ws.cond_silu, g_mod);
    }

    // state += gate (.) attn_out, desc stream plain when unmodulated.
    static void add_gated(nn::Mat<S>& d_state, nn::Mat<S>& b_state, const nn::Mat<S>& attn_out,
                          const nn::Mat<S>& mod, int gate_chunk, bool mod_desc, int b_count, int n,
                          int d) {
        for (int b = 0; b < b_count; ++b) {
            const auto gate = mod.row(b).segment(gate_chunk * d, d);
            const auto a_d = attn_out.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            const auto a_b = attn_out.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
            auto d_rows = d_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            auto b_rows = b_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            if (mod_desc) {
                d_rows.array() += a_d.array().rowwise() * gate.array();
            } else {
                d_rows += a_d;
            }
            b_rows.array() += a_b.array().rowwise() * gate.array();
        }
    }

    // Gradient of add_gated: fills g_attn, accumulates gate gradients;
    // residual gradients remain in g_d_state / g_b_state untouched.
    static void gated_grad(nn::Mat<S>& g_attn, const nn::Mat<S>& g_d_state,
                           const nn::Mat<S>& g_b_state, const nn::Mat<S>& attn_out,
                           const nn::Mat<S>& mod, nn::Mat<S>& g_mod, int gate_chunk, bool mod_desc,
                           int b_count, int n, int d) {
        for (int b = 0; b < b_count; ++b) {
            const auto gate = mod.row(b).segment(gate_chunk * d, d);
            auto g_gate = g_mod.row(b).segment(gate_chunk * d, d);
            const auto gd = g_d_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            const auto gb = g_b_state.middleRows(static_cast<Eigen::Index>(b) * n, n);
            const auto a_d = attn_out.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            const auto a_b = attn_out.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
            auto g_a_d = g_attn.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            auto g_a_b = g_attn.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
            if (mod_desc) {
                g_gate += (gd.array() * a_d.array()).colwise().sum().matrix() +
                          (gb.array() * a_b.array()).colwise().sum().matrix();
                g_a_d = (gd.array().rowwise() * gate.array()).matrix();
            } else {
                g_gate += (gb.array() * a_b.array()).colwise().sum().matrix();
                g_a_d = gd;
            }
            g_a_b = (gb.array().rowwise() * gate.array()).matrix();
        }
    }

    // Gradient through the shift/scale applied to the assembled sequence.
    static void unmodulate_concat(nn::Mat<S>& g_x, const nn::LayerNormCache<S>& ln_d,
                                  const nn::LayerNormCache<S>& ln_b, const nn::Mat<S>& mod,
                                  nn::Mat<S>& g_mod, int shift_chunk, int scale_chunk, bool mod_desc,
                                  int b_count, int n, int d) {
        for (int b = 0; b < b_count; ++b) {
            const auto scale = mod.row(b).segment(scale_chunk * d, d);
            auto g_shift = g_mod.row(b).segment(shift_chunk * d, d);
            auto g_scale = g_mod.row(b).segment(scale_chunk * d, d);
            auto g_d = g_x.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            auto g_b = g_x.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
            const auto xn_d = ln_d.xhat.middleRows(static_cast<Eigen::Index>(b) * n, n);
            const auto xn_b = ln_b.xhat.middleRows(static_cast<Eigen::Index>(b) * n, n);
            if (mod_desc) {
                g_shift += g_d.colwise().sum();
                g_scale += (g_d.array() * xn_d.array()).colwise().sum().matrix();
                g_d = (g_d.array().rowwise() * (scale.array() + 1)).matrix();
            }
            g_shift += g_b.colwise().sum();
            g_scale += (g_b.array() * xn_b.array()).colwise().sum().matrix();
            g_b = (g_b.array().rowwise() * (scale.array() + 1)).matrix();
        }
    }

    static void split_concat(const nn::Mat<S>& concat, nn::Mat<S>& d_part, nn::Mat<S>& b_part,
                             int b_count, int n) {
        for (int b = 0; b < b_count; ++b) {
            d_part.middleRows(static_cast<Eigen::Index>(b) * n, n) =
                concat.middleRows(static_cast<Eigen::Index>(b) * 2 * n, n);
            b_part.middleRows(static_cast<Eigen::Index>(b) * n, n) =
                concat.middleRows(static_cast<Eigen::Index>(b) * 2 * n + n, n);
        }
    }

    LDiTConfig cfg_;
    std::shared_ptr<TextEncoder<S>> encoder_;
    nn::Linear<S> box_in1_, box_in2_, desc_in1_, desc_in2_;
    nn::Param<S> seg_;
    nn::Linear<S> prompt_proj_;
    nn::Linear<S> t_mlp1_, t_mlp2_, r_mlp1_, r_mlp2_;
    std::vector<Block> blocks_;
    nn::Linear<S> final_mod_, head_;
    nn::ParamRefs<S> params_;
};

}  // namespace layoutdiff
