#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "layoutdiff/embedding.hpp"
#include "layoutdiff/errors.hpp"
#include "layoutdiff/geometry.hpp"
#include "layoutdiff/layout_io.hpp"
#include "layoutdiff/ldit.hpp"
#include "layoutdiff/optimizer.hpp"
#include "layoutdiff/rng.hpp"
#include "layoutdiff/schedule.hpp"

namespace layoutdiff {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 256;
    long total_steps = 1000;
    double prompt_dropout = 0.1;  // probability of swapping the prompt for the null encoding
    double ema_decay = 0.0;       // 0 disables EMA
    std::uint64_t seed = 0;
    int log_every = 50;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (total_steps < 0) throw ConfigError("total steps must be >= 0");
        if (prompt_dropout < 0.0 || prompt_dropout >= 1.0) {
            throw ConfigError("prompt dropout must be in [0, 1)");
        }
        if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("ema decay must be in [0, 1)");
    }
};

// Batch with owned conditioning; items point into `bundles`, so the struct
// must not be copied while items are in flight.
template <class S>
struct PreparedBatch {
    std::vector<ConditionBundle<S>> bundles;
    std::vector<BatchItem<S>> items;
    nn::Mat<S> noise;  // (batch * n_max) x 4 targets
};

// Masked mean squared error over valid objects' coordinates. Optionally
// emits the gradient w.r.t. the predictions.
template <class S>
double masked_mse(const nn::Mat<S>& preds, const nn::Mat<S>& noise,
                  const std::vector<BatchItem<S>>& items, int n_max, nn::Mat<S>* grad = nullptr) {
    long valid_total = 0;
    for (const auto& item : items) valid_total += item.cond->valid_count;
    const double denom = 4.0 * static_cast<double>(valid_total);
    if (denom <= 0.0) throw ContractError("batch has no valid objects");
    if (grad) grad->setZero(preds.rows(), preds.cols());
    double loss = 0.0;
    for (std::size_t b = 0; b < items.size(); ++b) {
        for (int i = 0; i < n_max; ++i) {
            if (!items[b].cond->mask[static_cast<std::size_t>(i)]) continue;
            const Eigen::Index row = static_cast<Eigen::Index>(b) * n_max + i;
            for (int c = 0; c < 4; ++c) {
                const double diff =
                    static_cast<double>(preds(row, c)) - static_cast<double>(noise(row, c));
                loss += diff * diff;
                if (grad) (*grad)(row, c) = static_cast<S>(2.0 * diff / denom);
            }
        }
    }
    return loss / denom;
}

// Training loop for the noise-prediction objective: per sample, draw a
// uniform timestep, mix in Gaussian noise through the scaled schedule, and
// regress the injected noise under a masked MSE. The global prompt is
// replaced by the null encoding with probability prompt_dropout, which is
// what makes classifier-free guidance usable at sampling time.
template <class S>
class Trainer {
public:
    Trainer(LDiT<S>& model, const NoiseSchedule& schedule, std::vector<LayoutRecord> corpus,
            TrainConfig cfg)
        : model_(model),
          schedule_(schedule),
          corpus_(std::move(corpus)),
          cfg_(cfg),
          rng_(cfg.seed) {
        cfg_.validate();
        if (corpus_.empty()) throw ContractError("training corpus is empty");
        for (const auto& rec : corpus_) {
            if (static_cast<int>(rec.layout.objects.size()) > model_.config().n_max) {
                throw ContractError("corpus record with " +
                                    std::to_string(rec.layout.objects.size()) +
                                    " objects exceeds model capacity");
            }
        }
        adam_.lr = cfg_.lr;
        adam_.init(model_.parameters());
        if (cfg_.ema_decay > 0.0) {
            ema_.decay = cfg_.ema_decay;
            ema_.init(model_.parameters());
        }
    }

    PreparedBatch<S> prepare_batch(Rng& rng) const {
        const int n_max = model_.config().n_max;
        PreparedBatch<S> batch;
        batch.bundles.reserve(static_cast<std::size_t>(cfg_.batch_size));
        batch.items.resize(static_cast<std::size_t>(cfg_.batch_size));
        batch.noise.resize(static_cast<Eigen::Index>(cfg_.batch_size) * n_max, 4);
        for (int b = 0; b < cfg_.batch_size; ++b) {
            const auto& rec =
                corpus_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(corpus_.size()) - 1))];
            std::vector<std::string> descriptions;
            descriptions.reserve(rec.layout.objects.size());
            for (const auto& obj : rec.layout.objects) descriptions.push_back(obj.description);
            const bool drop = rng.bernoulli(cfg_.prompt_dropout);
            const std::string prompt = drop ? std::string(kNullPrompt) : rec.prompt;
            batch.bundles.push_back(make_bundle<S>(prompt, descriptions, *model_.encoder(), n_max,
                                                   rec.layout.aspect_ratio()));
            const NormalizedBoxes norm = normalize(rec.layout, n_max);
            const int t = static_cast<int>(rng.uniform_int(1, schedule_.steps));
            Eigen::MatrixXd eps(n_max, 4);
            for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = rng.gaussian();
            const ForwardSample fwd = forward_diffuse(norm.coords, t, schedule_, eps);
            BatchItem<S>& item = batch.items[static_cast<std::size_t>(b)];
            item.boxes = fwd.noised.template cast<S>();
            item.t = t;
            batch.noise.middleRows(static_cast<Eigen::Index>(b) * n_max, n_max) =
                eps.template cast<S>();
        }
        for (int b = 0; b < cfg_.batch_size; ++b) {
            batch.items[static_cast<std::size_t>(b)].cond = &batch.bundles[static_cast<std::size_t>(b)];
        }
        return batch;
    }

    // One optimizer update; returns the batch loss.
    double step() {
        PreparedBatch<S> batch = prepare_batch(rng_);
        LDiTWorkspace<S> ws;
        const nn::Mat<S> preds = model_.forward(batch.items, ws);
        nn::Mat<S> grad;
        const double loss = masked_mse(preds, batch.noise, batch.items, model_.config().n_max, &grad);
        if (!std::isfinite(loss)) {
            throw TrainingDivergedError("non-finite loss at step " + std::to_string(step_count_) +
                                        ": " + diagnostics(batch));
        }
        model_.zero_grad();
        model_.backward(grad, ws);
        adam_.step(model_.parameters());
        if (cfg_.ema_decay > 0.0) ema_.update(model_.parameters());
        ++step_count_;
        return loss;
    }

    // Loss on a fixed batch without touching gradients or weights; the hook
    // for finite-difference checks.
    double compute_loss(const PreparedBatch<S>& batch) const {
        LDiTWorkspace<S> ws;
        const nn::Mat<S> preds = model_.forward(batch.items, ws);
        return masked_mse(preds, batch.noise, batch.items, model_.config().n_max);
    }

    // Analytic gradient of compute_loss accumulated into the model.
    double loss_and_grad(const PreparedBatch<S>& batch) {
        LDiTWorkspace<S> ws;
        const nn::Mat<S> preds = model_.forward(batch.items, ws);
        nn::Mat<S> grad;
        const double loss = masked_mse(preds, batch.noise, batch.items, model_.config().n_max, &grad);
        model_.backward(grad, ws);
        return loss;
    }

    using LogFn = std::function<void(long step, double loss, double lr, double examples_per_sec)>;

    void run(const LogFn& log = {}) {
        using clock = std::chrono::steady_clock;
        auto window_start = clock::now();
        long window_examples = 0;
        for (long s = 0; s < cfg_.total_steps; ++s) {
            const double loss = step();
            window_examples += cfg_.batch_size;
            if (log && ((s + 1) % cfg_.log_every == 0 || s + 1 == cfg_.total_steps)) {
                const double secs =
                    std::chrono::duration<double>(clock::now() - window_start).count();
                log(step_count_, loss, adam_.lr, secs > 0 ? window_examples / secs : 0.0);
                window_start = clock::now();
                window_examples = 0;
            }
        }
        if (cfg_.ema_decay > 0.0) ema_.copy_to(model_.parameters());
    }

    Adam<S>& optimizer() { return adam_; }
    long step_count() const { return step_count_; }
    Rng& rng() { return rng_; }
    const std::vector<LayoutRecord>& corpus() const { return corpus_; }

private:
    std::string diagnostics(const PreparedBatch<S>& batch) const {
        double min_box = 1e300, max_box = -1e300;
        int min_t = schedule_.steps, max_t = 0;
        for (const auto& item : batch.items) {
            min_box = std::min(min_box, static_cast<double>(item.boxes.minCoeff()));
            max_box = std::max(max_box, static_cast<double>(item.boxes.maxCoeff()));
            min_t = std::min(min_t, item.t);
            max_t = std::max(max_t, item.t);
        }
        return "batch stats: boxes in [" + std::to_string(min_box) + ", " + std::to_string(max_box) +
               "], t in [" + std::to_string(min_t) + ", " + std::to_string(max_t) +
               "], schedule T=" + std::to_string(schedule_.steps) +
               " s=" + std::to_string(schedule_.scale) +
               " abar_T=" + std::to_string(schedule_.abar_scaled(schedule_.steps));
    }

    LDiT<S>& model_;
    NoiseSchedule schedule_;
    std::vector<LayoutRecord> corpus_;
    TrainConfig cfg_;
    Rng rng_;
    Adam<S> adam_;
    Ema<S> ema_;
    long step_count_ = 0;
};

}  // namespace layoutdiff
