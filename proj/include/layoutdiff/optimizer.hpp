#pragma once

#include <cmath>
#include <vector>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/nn.hpp"

namespace layoutdiff {

// ADAM with bias correction; moment buffers are aligned with the parameter
// registry order.
template <class S>
struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    std::vector<nn::Mat<S>> m, v;

    void init(const nn::ParamRefs<S>& params) {
        m.clear();
        v.clear();
        m.reserve(params.size());
        v.reserve(params.size());
        for (const auto* p : params) {
            m.push_back(nn::Mat<S>::Zero(p->value.rows(), p->value.cols()));
            v.push_back(nn::Mat<S>::Zero(p->value.rows(), p->value.cols()));
        }
        step_count = 0;
    }

    void step(nn::ParamRefs<S>& params) {
        if (m.size() != params.size()) throw ContractError("optimizer not initialized for this model");
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
        const S lr_t = static_cast<S>(lr * std::sqrt(bc2) / bc1);
        const S e = static_cast<S>(eps);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            m[i] = b1 * m[i] + (1 - b1) * p.grad;
            v[i].array() = b2 * v[i].array() + (1 - b2) * p.grad.array().square();
            p.value.array() -= lr_t * m[i].array() / (v[i].array().sqrt() + e);
        }
    }
};

// Exponential moving average of the weights; copied into the model when
// training finalizes.
template <class S>
struct Ema {
    double decay = 0.999;
    std::vector<nn::Mat<S>> shadow;

    void init(const nn::ParamRefs<S>& params) {
        shadow.clear();
        shadow.reserve(params.size());
        for (const auto* p : params) shadow.push_back(p->value);
    }

    void update(const nn::ParamRefs<S>& params) {
        const S d = static_cast<S>(decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            shadow[i] = d * shadow[i] + (1 - d) * params[i]->value;
        }
    }

    void copy_to(nn::ParamRefs<S>& params) const {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = shadow[i];
    }
};

}  // namespace layoutdiff
