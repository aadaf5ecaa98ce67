// SPDX-License-Identifier: MIT
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "voxelage/config.hpp"
#include "voxelage/models.hpp"
#include "voxelage/nifti.hpp"

namespace voxelage {

// Saliency methods for regression targets. All methods are read-only on the
// model (eval-mode forwards and backwards only) and deterministic given their
// seeds. The model type must expose eval_scalar / input_gradient /
// capture_with_gradients as the graph-backed models do; the test-suite toy
// models implement the same surface.

struct SaliencyResult {
    Volume3D map;
    std::string method;  // gradcam | gradcam_avg | occlusion | smoothgrad
    std::string target_descriptor;
    Json params;
    std::string normalization;  // minmax01 | signed_raw
};

namespace interpret_detail {

// Trilinear resize to an arbitrary grid (half-voxel aligned, clamped).
inline Volume3D resize_trilinear(const Volume3D& src, const std::array<int64_t, 3>& out_shape) {
    Volume3D out(out_shape);
    out.affine = src.affine;
    std::array<std::vector<int64_t>, 3> idx;
    std::array<std::vector<double>, 3> frac;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t in_n = src.shape[axis], out_n = out_shape[axis];
        idx[axis].resize(static_cast<size_t>(out_n));
        frac[axis].resize(static_cast<size_t>(out_n));
        const double r = static_cast<double>(in_n) / static_cast<double>(out_n);
        for (int64_t o = 0; o < out_n; ++o) {
            double s = (static_cast<double>(o) + 0.5) * r - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
            const int64_t i = static_cast<int64_t>(std::floor(s));
            idx[axis][static_cast<size_t>(o)] = std::min(i, in_n - 1);
            frac[axis][static_cast<size_t>(o)] = s - static_cast<double>(idx[axis][static_cast<size_t>(o)]);
        }
    }
    auto clamped = [&](int axis, int64_t i) { return std::min(i, src.shape[axis] - 1); };
    for (int64_t a = 0; a < out_shape[0]; ++a)
        for (int64_t b = 0; b < out_shape[1]; ++b)
            for (int64_t c = 0; c < out_shape[2]; ++c) {
                double acc = 0;
                for (int da = 0; da < 2; ++da)
                    for (int db = 0; db < 2; ++db)
                        for (int dc = 0; dc < 2; ++dc) {
                            const double w =
                                (da ? frac[0][static_cast<size_t>(a)] : 1 - frac[0][static_cast<size_t>(a)]) *
                                (db ? frac[1][static_cast<size_t>(b)] : 1 - frac[1][static_cast<size_t>(b)]) *
                                (dc ? frac[2][static_cast<size_t>(c)] : 1 - frac[2][static_cast<size_t>(c)]);
                            acc += w * static_cast<double>(
                                           src.at(clamped(0, idx[0][static_cast<size_t>(a)] + da),
                                                  clamped(1, idx[1][static_cast<size_t>(b)] + db),
                                                  clamped(2, idx[2][static_cast<size_t>(c)] + dc)));
                        }
                out.at(a, b, c) = static_cast<float>(acc);
            }
    return out;
}

// Min-max to [0,1]; a constant map collapses to all zeros.
inline void normalize_minmax(Volume3D& map) {
    float lo = map.data[0], hi = map.data[0];
    for (float v : map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == lo) {
        std::fill(map.data.begin(), map.data.end(), 0.0f);
        return;
    }
    const float s = 1.0f / (hi - lo);
    for (float& v : map.data) v = (v - lo) * s;
}

inline std::vector<int64_t> grid_positions(int64_t extent, int64_t patch, int64_t stride) {
    std::vector<int64_t> pos;
    for (int64_t p = 0; p + patch < extent; p += stride) pos.push_back(p);
    pos.push_back(extent - patch);
    return pos;
}

}  // namespace interpret_detail

// Channel weights are the spatial means of the target gradient at the layer;
// the map is ReLU of the weighted activation sum, trilinearly upsampled to
// the input grid and min-max normalized.
template <class Model>
SaliencyResult grad_cam(Model& model, const Volume3D& input, const std::string& layer,
                        const ScalarTarget& target) {
    using T = float;
    const Tensor<T> input_t = volume_to_input<T>(input);
    auto [acts, grads] = model.capture_with_gradients(input_t, target, {layer});
    const Tensor<T>& act = acts.at(layer);
    const Tensor<T>& grad = grads.at(layer);
    require(act.rank() == 5 && act.shape[0] == 1, "grad_cam: expected a (1,C,D,H,W) activation");

    const int64_t C = act.shape[1];
    const int64_t S = act.shape[2] * act.shape[3] * act.shape[4];
    Volume3D raw({act.shape[2], act.shape[3], act.shape[4]});
    for (int64_t c = 0; c < C; ++c) {
        const T* g = grad.data() + c * S;
        double w = 0;
        for (int64_t i = 0; i < S; ++i) w += static_cast<double>(g[i]);
        w /= static_cast<double>(S);
        const T* a = act.data() + c * S;
        for (int64_t i = 0; i < S; ++i)
            raw.data[static_cast<size_t>(i)] += static_cast<float>(w * static_cast<double>(a[i]));
    }
    for (float& v : raw.data) v = std::max(v, 0.0f);

    SaliencyResult res;
    res.map = interpret_detail::resize_trilinear(raw, input.shape);
    res.map.affine = input.affine;
    interpret_detail::normalize_minmax(res.map);
    res.method = "gradcam";
    res.target_descriptor = target.descriptor();
    res.params = Json{{"layer", layer}};
    res.normalization = "minmax01";
    return res;
}

// Two-layer variant: each map is normalized to [0,1] after upsampling, then
// the voxel-wise arithmetic mean is returned.
template <class Model>
SaliencyResult grad_cam_averaged(Model& model, const Volume3D& input, const std::string& early_layer,
                                 const std::string& final_layer, const ScalarTarget& target) {
    require(early_layer != final_layer, "grad_cam_averaged: the two layers must differ");
    SaliencyResult a = grad_cam(model, input, early_layer, target);
    SaliencyResult b = grad_cam(model, input, final_layer, target);
    SaliencyResult res;
    res.map = a.map;
    for (size_t i = 0; i < res.map.data.size(); ++i)
        res.map.data[i] = 0.5f * (a.map.data[i] + b.map.data[i]);
    res.method = "gradcam_avg";
    res.target_descriptor = target.descriptor();
    res.params = Json{{"early_layer", early_layer}, {"final_layer", final_layer}};
    res.normalization = "minmax01";
    return res;
}

// Slides an occluding cube over a stride grid and records
// s = baseline - occluded prediction per position; the map holds the mean s
// over all cubes covering each voxel. Positive values mark regions whose
// content pushes the predicted age up.
template <class Model>
SaliencyResult occlusion_sensitivity(Model& model, const Volume3D& input, int64_t patch,
                                     int64_t stride, float fill, const ScalarTarget& target) {
    require(patch >= 1 && patch <= std::min({input.shape[0], input.shape[1], input.shape[2]}),
            "occlusion: patch must fit inside the input");
    require(stride >= 1, "occlusion: stride must be >= 1");
    require(stride <= patch, "occlusion: stride > patch would leave coverage gaps");

    using T = float;
    Tensor<T> input_t = volume_to_input<T>(input);
    const double baseline = static_cast<double>(model.eval_scalar(input_t, target));

    const auto px = interpret_detail::grid_positions(input.shape[0], patch, stride);
    const auto py = interpret_detail::grid_positions(input.shape[1], patch, stride);
    const auto pz = interpret_detail::grid_positions(input.shape[2], patch, stride);

    struct Probe {
        std::array<int64_t, 3> origin;
        double score;
    };
    std::vector<Probe> probes;
    Tensor<T> occluded = input_t;
    const int64_t H = input.shape[1], W = input.shape[2];
    for (int64_t ox : px)
        for (int64_t oy : py)
            for (int64_t oz : pz) {
                occluded.v = input_t.v;
                for (int64_t a = 0; a < patch; ++a)
                    for (int64_t b = 0; b < patch; ++b)
                        for (int64_t c = 0; c < patch; ++c)
                            occluded.v[static_cast<size_t>(((ox + a) * H + oy + b) * W + oz + c)] =
                                fill;
                const double y = static_cast<double>(model.eval_scalar(occluded, target));
                probes.push_back({{ox, oy, oz}, baseline - y});
            }

    // mean of per-cube scores over covering cubes, accumulated in a fixed
    // canonical order so the probe evaluation order cannot matter
    std::vector<double> sum(static_cast<size_t>(input.numel()), 0.0);
    std::vector<int32_t> count(static_cast<size_t>(input.numel()), 0);
    for (const auto& probe : probes)
        for (int64_t a = 0; a < patch; ++a)
            for (int64_t b = 0; b < patch; ++b)
                for (int64_t c = 0; c < patch; ++c) {
                    const size_t i = static_cast<size_t>(
                        ((probe.origin[0] + a) * H + probe.origin[1] + b) * W + probe.origin[2] + c);
                    sum[i] += probe.score;
                    count[i] += 1;
                }

    SaliencyResult res;
    res.map = Volume3D(input.shape);
    res.map.affine = input.affine;
    for (size_t i = 0; i < sum.size(); ++i)
        res.map.data[i] = count[i] ? static_cast<float>(sum[i] / count[i]) : 0.0f;
    res.method = "occlusion";
    res.target_descriptor = target.descriptor();
    res.params = Json{{"patch", patch}, {"stride", stride}, {"fill", fill}};
    res.normalization = "signed_raw";
    return res;
}

inline constexpr int kSmoothGradDefaultSamples = 25;
inline constexpr double kSmoothGradDefaultSigma = 0.1;  // fraction of dynamic range

enum class SmoothGradMode { Signed, Magnitude };

// Mean input gradient over n noisy copies of the input; sigma is a fraction
// of the input dynamic range.
template <class Model>
SaliencyResult smoothgrad(Model& model, const Volume3D& input, int64_t n, double sigma,
                          const ScalarTarget& target, SmoothGradMode mode = SmoothGradMode::Signed,
                          uint64_t seed = 0) {
    require(n >= 1, "smoothgrad: n must be >= 1");
    require(sigma >= 0, "smoothgrad: sigma must be >= 0");

    using T = float;
    const Tensor<T> input_t = volume_to_input<T>(input);
    float lo = input.data[0], hi = input.data[0];
    for (float v : input.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double noise_sigma = sigma * static_cast<double>(hi - lo);

    std::vector<double> acc(input_t.v.size(), 0.0);
    Tensor<T> noisy = input_t;
    for (int64_t k = 0; k < n; ++k) {
        if (noise_sigma > 0) {
            Rng rng(derive_seed(seed, static_cast<uint64_t>(k)));
            for (size_t i = 0; i < noisy.v.size(); ++i)
                noisy.v[i] = input_t.v[i] + static_cast<T>(rng.normal(0.0, noise_sigma));
        } else {
            noisy.v = input_t.v;
        }
        const Tensor<T> grad = model.input_gradient(noisy, target);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(grad.v[i]);
    }

    SaliencyResult res;
    res.map = Volume3D(input.shape);
    res.map.affine = input.affine;
    for (size_t i = 0; i < acc.size(); ++i) {
        double v = acc[i] / static_cast<double>(n);
        if (mode == SmoothGradMode::Magnitude) v = std::abs(v);
        res.map.data[i] = static_cast<float>(v);
    }
    res.method = "smoothgrad";
    res.target_descriptor = target.descriptor();
    res.params = Json{{"n", n},
                      {"sigma", sigma},
                      {"mode", mode == SmoothGradMode::Signed ? "signed" : "magnitude"},
                      {"seed", seed}};
    res.normalization = "signed_raw";
    return res;
}

// d(target)/d(input) as a volume aligned with the input.
template <class Model>
Volume3D input_gradient_volume(Model& model, const Volume3D& input, const ScalarTarget& target) {
    const Tensor<float> grad = model.input_gradient(volume_to_input<float>(input), target);
    return tensor_to_volume(grad, input.affine, 0, 0);
}

// Writes <base>.nii.gz plus a JSON sidecar describing the method.
inline void save_saliency(const SaliencyResult& res, const std::string& base,
                          const std::string& checkpoint_id) {
    write_nifti(res.map, base + ".nii.gz");
    Json sidecar{{"method", res.method},
                 {"params", res.params},
                 {"target_descriptor", res.target_descriptor},
                 {"normalization", res.normalization},
                 {"model_checkpoint_id", checkpoint_id}};
    std::ofstream out(base + ".json");
    if (!out) throw IoError("cannot write saliency sidecar: " + base + ".json");
    out << sidecar.dump(2) << "\n";
}

}  // namespace voxelage
