#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "layoutdiff/embedding.hpp"
#include "layoutdiff/errors.hpp"
#include "layoutdiff/geometry.hpp"
#include "layoutdiff/ldit.hpp"
#include "layoutdiff/rng.hpp"
#include "layoutdiff/schedule.hpp"

namespace layoutdiff {

struct SampleConfig {
    enum class Method { ddim, ddpm };
    Method method = Method::ddim;
    int steps = 15;          // K, respaced over the schedule
    double cfg_scale = 2.0;  // w
    std::uint64_t seed = 0;

    void validate(const NoiseSchedule& schedule) const {
        if (steps < 1 || steps > schedule.steps) {
            throw InvalidArgumentError("sampling steps must be in [1, " +
                                       std::to_string(schedule.steps) + "]");
        }
        if (cfg_scale < 0.0) throw InvalidArgumentError("cfg scale must be >= 0");
    }
};

inline SampleConfig::Method sampler_from_string(const std::string& s) {
    if (s == "ddim") return SampleConfig::Method::ddim;
    if (s == "ddpm") return SampleConfig::Method::ddpm;
    throw ConfigError("unknown sampler '" + s + "'");
}

template <class S>
struct SampleRequest {
    std::string prompt;
    std::vector<std::string> descriptions;
    double width = 512.0;
    double height = 512.0;
    std::uint64_t seed = 0;
    std::optional<nn::Mat<S>> init;  // normalized-space state at the top level
};

// Which objects of a partial layout are frozen during completion.
struct CompletionMask {
    std::vector<bool> known;

    int unknown_count() const {
        int n = 0;
        for (const bool k : known) n += k ? 0 : 1;
        return n;
    }
};

namespace detail {

// eps_hat = eps_uncond + w * (eps_cond - eps_uncond). At w == 1 this is the
// conditional prediction exactly, so the unconditional pass is skipped and
// the identity holds with zero floating error.
template <class S>
std::vector<nn::Mat<S>> guided_eps(const LDiT<S>& model, const std::vector<nn::Mat<S>>& states,
                                   const std::vector<ConditionBundle<S>>& cond,
                                   const std::vector<ConditionBundle<S>>& uncond, int t, double w) {
    const int n_max = model.config().n_max;
    const std::size_t count = states.size();
    std::vector<BatchItem<S>> items(count);
    for (std::size_t i = 0; i < count; ++i) {
        items[i].boxes = states[i];
        items[i].cond = &cond[i];
        items[i].t = t;
    }
    LDiTWorkspace<S> ws;
    const nn::Mat<S> eps_c = model.forward(items, ws);
    std::vector<nn::Mat<S>> out(count);
    if (w == 1.0) {
        for (std::size_t i = 0; i < count; ++i) {
            out[i] = eps_c.middleRows(static_cast<Eigen::Index>(i) * n_max, n_max);
        }
        return out;
    }
    for (std::size_t i = 0; i < count; ++i) items[i].cond = &uncond[i];
    LDiTWorkspace<S> ws_u;
    const nn::Mat<S> eps_u = model.forward(items, ws_u);
    const S sw = static_cast<S>(w);
    for (std::size_t i = 0; i < count; ++i) {
        const auto ec = eps_c.middleRows(static_cast<Eigen::Index>(i) * n_max, n_max);
        const auto eu = eps_u.middleRows(static_cast<Eigen::Index>(i) * n_max, n_max);
        out[i] = eu + sw * (ec - eu);
    }
    return out;
}

template <class S>
nn::Mat<S> gaussian_state(int n_max, Rng& rng) {
    nn::Mat<S> m(n_max, 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = static_cast<S>(rng.gaussian());
    return m;
}

}  // namespace detail

// Reverse diffusion for a batch of requests, stepping every request through
// the same respaced timestep ladder. DDIM runs the deterministic update;
// DDPM draws from the small-variance posterior. Deterministic per request
// given its seed, independent of batch composition.
template <class S>
std::vector<Layout> sample_layouts(const LDiT<S>& model, const NoiseSchedule& schedule,
                                   const std::vector<SampleRequest<S>>& requests,
                                   const SampleConfig& config) {
    config.validate(schedule);
    const int n_max = model.config().n_max;
    const std::size_t count = requests.size();
    if (count == 0) return {};
    std::vector<ConditionBundle<S>> cond, uncond;
    cond.reserve(count);
    uncond.reserve(count);
    std::vector<nn::Mat<S>> states(count);
    std::vector<Rng> rngs;
    rngs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& req = requests[i];
        if (req.descriptions.empty()) throw ContractError("sampling needs at least one description");
        check_canvas(req.width, req.height);
        cond.push_back(make_bundle<S>(req.prompt, req.descriptions, *model.encoder(), n_max,
                                      req.width / req.height));
        uncond.push_back(with_null_prompt(cond.back(), *model.encoder()));
        rngs.emplace_back(Rng(req.seed).fork(0x5a3fULL));
        states[i] = req.init ? *req.init : detail::gaussian_state<S>(n_max, rngs.back());
    }
    const std::vector<int> ladder = respaced_timesteps(schedule.steps, config.steps);
    for (std::size_t step = 0; step < ladder.size(); ++step) {
        const int t = ladder[step];
        const int t_prev = step + 1 < ladder.size() ? ladder[step + 1] : 0;
        const auto eps = detail::guided_eps(model, states, cond, uncond, t, config.cfg_scale);
        const double a_t = schedule.abar_scaled(t);
        const double a_prev = schedule.abar_scaled(t_prev);
        const S sqrt_at = static_cast<S>(std::sqrt(a_t));
        const S sqrt_1mat = static_cast<S>(std::sqrt(1.0 - a_t));
        const S sqrt_aprev = static_cast<S>(std::sqrt(a_prev));
        const S sqrt_1maprev = static_cast<S>(std::sqrt(1.0 - a_prev));
        for (std::size_t i = 0; i < count; ++i) {
            const nn::Mat<S> x0 = (states[i] - sqrt_1mat * eps[i]) / sqrt_at;
            if (config.method == SampleConfig::Method::ddim) {
                states[i] = sqrt_aprev * x0 + sqrt_1maprev * eps[i];
            } else {
                const double alpha_step = a_t / a_prev;
                const double beta_step = 1.0 - alpha_step;
                const double c0 = std::sqrt(a_prev) * beta_step / (1.0 - a_t);
                const double cx = std::sqrt(alpha_step) * (1.0 - a_prev) / (1.0 - a_t);
                const double var = beta_step * (1.0 - a_prev) / (1.0 - a_t);
                states[i] = static_cast<S>(c0) * x0 + static_cast<S>(cx) * states[i];
                if (t_prev > 0) {
                    states[i] += static_cast<S>(std::sqrt(var)) *
                                 detail::gaussian_state<S>(n_max, rngs[i]);
                }
            }
        }
    }
    std::vector<Layout> layouts(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& req = requests[i];
        NormalizedBoxes norm;
        norm.coords = states[i].template cast<double>();
        norm.mask = cond[i].mask;
        norm.valid_count = cond[i].valid_count;
        const std::vector<BoundingBox> boxes = denormalize(norm, req.width, req.height);
        Layout layout;
        layout.width = req.width;
        layout.height = req.height;
        for (std::size_t k = 0; k < req.descriptions.size(); ++k) {
            layout.objects.push_back({req.descriptions[k], boxes[k]});
        }
        layouts[i] = std::move(layout);
    }
    return layouts;
}

template <class S>
Layout ddim_sample(const LDiT<S>& model, const NoiseSchedule& schedule, const SampleRequest<S>& request,
                   SampleConfig config) {
    config.method = SampleConfig::Method::ddim;
    return sample_layouts(model, schedule, {request}, config)[0];
}

template <class S>
Layout ddpm_sample(const LDiT<S>& model, const NoiseSchedule& schedule, const SampleRequest<S>& request,
                   SampleConfig config) {
    config.method = SampleConfig::Method::ddpm;
    return sample_layouts(model, schedule, {request}, config)[0];
}

// Deterministic DDIM recurrence in the noise-adding direction over the same
// respaced ladder; the result seeds ddim_sample. The model is evaluated at
// the target level of each hop, mirroring the levels the reverse pass visits.
template <class S>
std::vector<nn::Mat<S>> ddim_invert_states(const LDiT<S>& model, const NoiseSchedule& schedule,
                                           const std::vector<nn::Mat<S>>& x0,
                                           const std::vector<ConditionBundle<S>>& cond, int k,
                                           double cfg_scale = 1.0) {
    if (k == 0) return x0;
    if (k < 0 || k > schedule.steps) throw InvalidArgumentError("inversion steps out of range");
    std::vector<ConditionBundle<S>> uncond;
    uncond.reserve(cond.size());
    for (const auto& c : cond) uncond.push_back(with_null_prompt(c, *model.encoder()));
    std::vector<int> ladder = respaced_timesteps(schedule.steps, k);
    std::vector<int> levels;
    levels.push_back(0);
    for (auto it = ladder.rbegin(); it != ladder.rend(); ++it) levels.push_back(*it);
    std::vector<nn::Mat<S>> states = x0;
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
        const int cur = levels[i];
        const int next = levels[i + 1];
        const auto eps = detail::guided_eps(model, states, cond, uncond, next, cfg_scale);
        const double a_cur = schedule.abar_scaled(cur);
        const double a_next = schedule.abar_scaled(next);
        const S sqrt_acur = static_cast<S>(std::sqrt(a_cur));
        const S sqrt_1macur = static_cast<S>(std::sqrt(1.0 - a_cur));
        const S sqrt_anext = static_cast<S>(std::sqrt(a_next));
        const S sqrt_1manext = static_cast<S>(std::sqrt(1.0 - a_next));
        for (std::size_t r = 0; r < states.size(); ++r) {
            const nn::Mat<S> pred_x0 = (states[r] - sqrt_1macur * eps[r]) / sqrt_acur;
            states[r] = sqrt_anext * pred_x0 + sqrt_1manext * eps[r];
        }
    }
    return states;
}

template <class S>
nn::Mat<S> ddim_invert(const LDiT<S>& model, const NoiseSchedule& schedule, const Layout& layout,
                       const ConditionBundle<S>& cond, int k, double cfg_scale = 1.0) {
    const NormalizedBoxes norm = normalize(layout, model.config().n_max);
    std::vector<nn::Mat<S>> x0 = {norm.coords.template cast<S>()};
    std::vector<ConditionBundle<S>> conds = {cond};
    return ddim_invert_states(model, schedule, x0, conds, k, cfg_scale)[0];
}

// Inpainting-style completion: at every reverse step the known objects'
// coordinates are overwritten with their forward-diffused ground truth at the
// current level, so generation only ever fills the unknown rows. Known boxes
// are copied bit-exactly into the result.
template <class S>
Layout complete_layout(const LDiT<S>& model, const NoiseSchedule& schedule, const Layout& partial,
                       const CompletionMask& mask, const std::string& prompt,
                       const SampleConfig& config) {
    config.validate(schedule);
    const int n_max = model.config().n_max;
    const int n = static_cast<int>(partial.objects.size());
    if (static_cast<int>(mask.known.size()) != n) {
        throw InvalidArgumentError("completion mask size does not match layout");
    }
    if (mask.unknown_count() == 0) {
        throw InvalidArgumentError("completion requires at least one unknown object");
    }
    check_canvas(partial.width, partial.height);
    std::vector<std::string> descriptions;
    for (const auto& obj : partial.objects) descriptions.push_back(obj.description);
    std::vector<ConditionBundle<S>> cond = {make_bundle<S>(prompt, descriptions, *model.encoder(),
                                                           n_max, partial.aspect_ratio())};
    std::vector<ConditionBundle<S>> uncond = {with_null_prompt(cond[0], *model.encoder())};
    const NormalizedBoxes norm = normalize(partial, n_max);
    const nn::Mat<S> x0_known = norm.coords.template cast<S>();
    Rng rng = Rng(config.seed).fork(0xc0311ULL);
    std::vector<nn::Mat<S>> states = {detail::gaussian_state<S>(n_max, rng)};
    const std::vector<int> ladder = respaced_timesteps(schedule.steps, config.steps);

    auto overwrite_known = [&](int level) {
        const double a = schedule.abar_scaled(level);
        const S ca = static_cast<S>(std::sqrt(a));
        const S cb = static_cast<S>(std::sqrt(1.0 - a));
        for (int i = 0; i < n; ++i) {
            if (!mask.known[static_cast<std::size_t>(i)]) continue;
            for (int c = 0; c < 4; ++c) {
                states[0](i, c) = ca * x0_known(i, c) + cb * static_cast<S>(rng.gaussian());
            }
        }
    };
    overwrite_known(ladder.front());

    for (std::size_t step = 0; step < ladder.size(); ++step) {
        const int t = ladder[step];
        const int t_prev = step + 1 < ladder.size() ? ladder[step + 1] : 0;
        const auto eps = detail::guided_eps(model, states, cond, uncond, t, config.cfg_scale);
        const double a_t = schedule.abar_scaled(t);
        const double a_prev = schedule.abar_scaled(t_prev);
        const nn::Mat<S> x0 =
            (states[0] - static_cast<S>(std::sqrt(1.0 - a_t)) * eps[0]) / static_cast<S>(std::sqrt(a_t));
        if (config.method == SampleConfig::Method::ddim) {
            states[0] = static_cast<S>(std::sqrt(a_prev)) * x0 +
                        static_cast<S>(std::sqrt(1.0 - a_prev)) * eps[0];
        } else {
            const double alpha_step = a_t / a_prev;
            const double beta_step = 1.0 - alpha_step;
            const double c0 = std::sqrt(a_prev) * beta_step / (1.0 - a_t);
            const double cx = std::sqrt(alpha_step) * (1.0 - a_prev) / (1.0 - a_t);
            const double var = beta_step * (1.0 - a_prev) / (1.0 - a_t);
            states[0] = static_cast<S>(c0) * x0 + static_cast<S>(cx) * states[0];
            if (t_prev > 0) {
                states[0] += static_cast<S>(std::sqrt(var)) * detail::gaussian_state<S>(n_max, rng);
            }
        }
        if (t_prev > 0) overwrite_known(t_prev);
    }

    NormalizedBoxes out_norm;
    out_norm.coords = states[0].template cast<double>();
    out_norm.mask = cond[0].mask;
    out_norm.valid_count = cond[0].valid_count;
    const std::vector<BoundingBox> boxes = denormalize(out_norm, partial.width, partial.height);
    Layout result;
    result.width = partial.width;
    result.height = partial.height;
    for (int i = 0; i < n; ++i) {
        SceneObject obj;
        obj.description = partial.objects[static_cast<std::size_t>(i)].description;
        obj.box = mask.known[static_cast<std::size_t>(i)]
                      ? partial.objects[static_cast<std::size_t>(i)].box
                      : boxes[static_cast<std::size_t>(i)];
        result.objects.push_back(std::move(obj));
    }
    return result;
}

}  // namespace layoutdiff
