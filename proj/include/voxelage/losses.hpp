// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "voxelage/common.hpp"
#include "voxelage/tensor.hpp"

namespace voxelage {

inline constexpr double kDiceEpsilon = 1e-6;
inline constexpr double kTaskWeightCap = 100.0;
inline constexpr double kTaskEmaDecay = 0.9;

// Combined-loss weights (alpha: segmentation, beta: global age, gamma: voxel
// age). Treated as constants during backpropagation.
struct LossWeights {
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 1.0;
};

struct LossBreakdown {
    double dice_loss = 0.0;   // unitless, [0,1)
    double mae_global = 0.0;  // years
    double mae_voxel = 0.0;   // years
    LossWeights weights;
    double total = 0.0;
};

// Weighted sum, evaluated in a fixed order so logged values recombine
// exactly.
inline LossBreakdown combined_loss(double dice_loss, double mae_global, double mae_voxel,
                                   const LossWeights& w) {
    LossBreakdown b;
    b.dice_loss = dice_loss;
    b.mae_global = mae_global;
    b.mae_voxel = mae_voxel;
    b.weights = w;
    b.total = w.alpha * dice_loss + w.beta * mae_global + w.gamma * mae_voxel;
    return b;
}

// Per-class soft dice (V-Net squared-denominator form) over the three tissue
// classes; background is excluded. probs is (N,C,D,H,W), labels (N,D,H,W).
template <class T>
std::array<double, 3> soft_dice_per_class(const Tensor<T>& probs, const Tensor<uint8_t>& labels) {
    require(probs.rank() == 5 && labels.rank() == 4, "soft_dice: bad ranks");
    require(probs.shape[0] == labels.shape[0] && probs.shape[2] == labels.shape[1] &&
                probs.shape[3] == labels.shape[2] && probs.shape[4] == labels.shape[3],
            "soft_dice: shape mismatch");
    const int64_t N = probs.shape[0], C = probs.shape[1];
    const int64_t S = probs.shape[2] * probs.shape[3] * probs.shape[4];
    require(C >= 4, "soft_dice: expected 4 channels");
    std::array<double, 3> dice{};
    for (int64_t cls = 1; cls <= 3; ++cls) {
        double acc = 0;
        for (int64_t n = 0; n < N; ++n) {
            const T* p = probs.data() + (n * C + cls) * S;
            const uint8_t* g = labels.data() + n * S;
            double inter = 0, psum = 0, gsum = 0;
            for (int64_t i = 0; i < S; ++i) {
                const double pv = static_cast<double>(p[i]);
                const double gv = g[i] == cls ? 1.0 : 0.0;
                inter += pv * gv;
                psum += pv * pv;
                gsum += gv;
            }
            acc += 2.0 * inter / (psum + gsum + kDiceEpsilon);
        }
        dice[static_cast<size_t>(cls - 1)] = acc / static_cast<double>(N);
    }
    return dice;
}

// 1 - mean(per-class soft dice). When grad is given it receives
// d(loss)/d(probs), accumulated shape (N,C,D,H,W).
template <class T>
double soft_dice_loss(const Tensor<T>& probs, const Tensor<uint8_t>& labels,
                      Tensor<T>* grad = nullptr) {
    require(probs.rank() == 5 && labels.rank() == 4, "soft_dice: bad ranks");
    require(probs.shape[0] == labels.shape[0] && probs.shape[2] == labels.shape[1] &&
                probs.shape[3] == labels.shape[2] && probs.shape[4] == labels.shape[3],
            "soft_dice: shape mismatch");
    const int64_t N = probs.shape[0], C = probs.shape[1];
    require(C >= 4, "soft_dice: expected 4 channels");
    const int64_t S = probs.shape[2] * probs.shape[3] * probs.shape[4];
    double mean_dice = 0;
    if (grad) grad->resize(probs.shape);
    for (int64_t cls = 1; cls <= 3; ++cls) {
        for (int64_t n = 0; n < N; ++n) {
            const T* p = probs.data() + (n * C + cls) * S;
            const uint8_t* g = labels.data() + n * S;
            double inter = 0, psum = 0, gsum = 0;
            for (int64_t i = 0; i < S; ++i) {
                const double pv = static_cast<double>(p[i]);
                const double gv = g[i] == cls ? 1.0 : 0.0;
                inter += pv * gv;
                psum += pv * pv;
                gsum += gv;
            }
            const double numer = 2.0 * inter;
            const double denom = psum + gsum + kDiceEpsilon;
            mean_dice += numer / denom;
            if (grad) {
                // d(1 - d_c/(3N))/dp = -(2g*denom - numer*2p) / (3N*denom^2)
                T* gp = grad->data() + (n * C + cls) * S;
                const double scale = 1.0 / (3.0 * static_cast<double>(N) * denom * denom);
                for (int64_t i = 0; i < S; ++i) {
                    const double pv = static_cast<double>(p[i]);
                    const double gv = g[i] == cls ? 1.0 : 0.0;
                    gp[i] -= static_cast<T>((2.0 * gv * denom - numer * 2.0 * pv) * scale);
                }
            }
        }
    }
    return 1.0 - mean_dice / (3.0 * static_cast<double>(N));
}

// Batch-mean absolute error in years; grad receives d/d(pred).
template <class T>
double mae_global(const std::vector<T>& pred, const std::vector<double>& target,
                  std::vector<T>* grad = nullptr) {
    require(!pred.empty() && pred.size() == target.size(), "mae_global: size mismatch");
    if (grad) grad->assign(pred.size(), T(0));
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - target[i];
        acc += std::abs(d);
        if (grad)
            (*grad)[i] = static_cast<T>((d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) /
                                        static_cast<double>(pred.size()));
    }
    return acc / static_cast<double>(pred.size());
}

// Mean absolute error over brain voxels only. pred/target are (N,1,D,H,W),
// mask is (N,D,H,W) with nonzero marking brain tissue.
template <class T>
double mae_voxel(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<uint8_t>& mask,
                 Tensor<T>* grad = nullptr) {
    require(pred.rank() == 5 && pred.shape[1] == 1, "mae_voxel: pred must be (N,1,D,H,W)");
    check_same_shape(pred, target, "mae_voxel");
    require(mask.rank() == 4 && mask.shape[0] == pred.shape[0] && mask.shape[1] == pred.shape[2] &&
                mask.shape[2] == pred.shape[3] && mask.shape[3] == pred.shape[4],
            "mae_voxel: mask shape mismatch");
    int64_t count = 0;
    for (auto m : mask.v) count += m != 0;
    require(count > 0, "mae_voxel: empty brain mask");
    if (grad) grad->resize(pred.shape);
    double acc = 0;
    const double inv = 1.0 / static_cast<double>(count);
    for (size_t i = 0; i < pred.v.size(); ++i) {
        if (!mask.v[i]) continue;
        const double d = static_cast<double>(pred.v[i]) - static_cast<double>(target.v[i]);
        acc += std::abs(d);
        if (grad) grad->v[i] += static_cast<T>((d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv);
    }
    return acc * inv;
}

// Inverse-EMA weighting: w_i = (sum of EMAs) / (3 * ema_i + epsilon), so the
// weighted terms w_i * ema_i equalize across tasks. Capped to keep a
// vanishing task from blowing up the objective.
inline LossWeights update_task_weights(const std::array<double, 3>& ema_losses,
                                       double epsilon = 1e-8) {
    for (double e : ema_losses) require(e >= 0, "update_task_weights: EMAs must be >= 0");
    require(epsilon > 0, "update_task_weights: epsilon must be > 0");
    const double total = ema_losses[0] + ema_losses[1] + ema_losses[2];
    auto weight = [&](double e) { return std::min(total / (3.0 * e + epsilon), kTaskWeightCap); };
    return LossWeights{weight(ema_losses[0]), weight(ema_losses[1]), weight(ema_losses[2])};
}

// Per-task loss EMAs, updated once per batch, read at each epoch start.
struct TaskEma {
    std::array<double, 3> values{0, 0, 0};
    bool initialized = false;

    void update(double dice, double g, double v) {
        if (!initialized) {
            values = {dice, g, v};
            initialized = true;
            return;
        }
        values[0] = kTaskEmaDecay * values[0] + (1.0 - kTaskEmaDecay) * dice;
        values[1] = kTaskEmaDecay * values[1] + (1.0 - kTaskEmaDecay) * g;
        values[2] = kTaskEmaDecay * values[2] + (1.0 - kTaskEmaDecay) * v;
    }
};

}  // namespace voxelage
