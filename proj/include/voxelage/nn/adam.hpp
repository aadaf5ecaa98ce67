// SPDX-License-Identifier: MIT
#pragma once

#include <cmath>
#include <vector>

#include "voxelage/nn/layers.hpp"

namespace voxelage::nn {

// Adaptive-moment gradient descent with bias correction, default moment
// parameters.
template <class T>
class Adam {
public:
    explicit Adam(std::vector<Param<T>*> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->value.v.size(), 0.0);
            v_[i].assign(params_[i]->value.v.size(), 0.0);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->grad.zero();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i]->value.v;
            const auto& g = params_[i]->grad.v;
            for (size_t j = 0; j < p.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    std::vector<Param<T>*> params_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace voxelage::nn
