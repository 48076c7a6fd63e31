// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "deepflow/network.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

template <typename T>
struct AdamWConfig {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
};

template <typename T>
class AdamW {
public:
    AdamW(const ParamStore<T>& params, AdamWConfig<T> cfg) : cfg_(cfg) {
        m_.reserve(params.count());
        v_.reserve(params.count());
        for (const auto& e : params.entries) {
            m_.push_back(Tensor<T>::zeros(e.second.shape));
            v_.push_back(Tensor<T>::zeros(e.second.shape));
        }
    }

    void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads) {
        if (grads.size() != params.count()) throw std::invalid_argument("AdamW: grads size mismatch");
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
        for (std::size_t p = 0; p < params.count(); ++p) {
            Tensor<T>& theta = params[p];
            const Tensor<T>& g = grads[p];
            Tensor<T>& m = m_[p];
            Tensor<T>& v = v_[p];
            for (std::int64_t i = 0; i < theta.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (T(1) - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                theta[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
            }
        }
    }

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    std::vector<Tensor<T>>& m() { return m_; }
    std::vector<Tensor<T>>& v() { return v_; }
    const std::vector<Tensor<T>>& m() const { return m_; }
    const std::vector<Tensor<T>>& v() const { return v_; }

private:
    AdamWConfig<T> cfg_;
    std::int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// Exponential moving average of the parameters; used for all evaluation
// and sampling.
template <typename T>
class Ema {
public:
    Ema(const ParamStore<T>& params, T decay) : decay_(decay) {
        shadow_.reserve(params.count());
        for (const auto& e : params.entries) shadow_.push_back(e.second);
    }

    void update(const ParamStore<T>& params) {
        for (std::size_t p = 0; p < params.count(); ++p) {
            Tensor<T>& s = shadow_[p];
            const Tensor<T>& theta = params[p];
            for (std::int64_t i = 0; i < s.size(); ++i)
                s[i] = decay_ * s[i] + (T(1) - decay_) * theta[i];
        }
    }

    T decay() const { return decay_; }
    std::vector<Tensor<T>>& shadow() { return shadow_; }
    const std::vector<Tensor<T>>& shadow() const { return shadow_; }

private:
    T decay_;
    std::vector<Tensor<T>> shadow_;
};

} // namespace deepflow
