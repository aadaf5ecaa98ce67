// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <cmath>

#include "voxelage/common.hpp"
#include "voxelage/rng.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

inline constexpr int kCropRetryBudget = 32;
inline constexpr double kDefaultMinBrainFraction = 0.3;

namespace sampling_detail {

template <class T>
VolumeGrid<T> crop(const VolumeGrid<T>& vol, const std::array<int64_t, 3>& origin, int64_t size) {
    VolumeGrid<T> out({size, size, size});
    out.affine = vol.affine;
    for (int i = 0; i < 3; ++i)
        for (int r = 0; r < 3; ++r)
            out.affine[4 * r + 3] += vol.affine[4 * r + i] * static_cast<double>(origin[i]);
    for (int64_t a = 0; a < size; ++a)
        for (int64_t b = 0; b < size; ++b)
            for (int64_t c = 0; c < size; ++c)
                out.at(a, b, c) = vol.at(origin[0] + a, origin[1] + b, origin[2] + c);
    return out;
}

inline double brain_fraction(const MaskVolume& mask, const std::array<int64_t, 3>& origin,
                             int64_t size) {
    int64_t hits = 0;
    for (int64_t a = 0; a < size; ++a)
        for (int64_t b = 0; b < size; ++b)
            for (int64_t c = 0; c < size; ++c)
                hits += mask.at(origin[0] + a, origin[1] + b, origin[2] + c) != 0;
    return static_cast<double>(hits) / static_cast<double>(size * size * size);
}

}  // namespace sampling_detail

// Uniformly random cube crop, retried up to kCropRetryBudget times until the
// brain-mask fraction reaches min_brain_fraction; falls back to the best
// candidate seen.
inline PatchSample random_crop(const Subject& subject, int64_t size, double min_brain_fraction,
                               Rng& rng) {
    require(size > 0, "random_crop: size must be positive");
    require(min_brain_fraction >= 0.0 && min_brain_fraction < 1.0,
            "random_crop: min_brain_fraction must be in [0,1)");
    for (int i = 0; i < 3; ++i)
        require(size <= subject.image.shape[i], "random_crop: size exceeds volume extent");

    std::array<int64_t, 3> best{0, 0, 0};
    bool single_position = true;
    for (int i = 0; i < 3; ++i) single_position = single_position && size == subject.image.shape[i];
    double best_fraction = -1.0;
    for (int attempt = 0; attempt < (single_position ? 1 : kCropRetryBudget); ++attempt) {
        std::array<int64_t, 3> origin;
        for (int i = 0; i < 3; ++i) {
            const int64_t span = subject.image.shape[i] - size + 1;
            origin[i] = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(span)));
        }
        const double f = sampling_detail::brain_fraction(subject.brain_mask, origin, size);
        if (f > best_fraction) {
            best_fraction = f;
            best = origin;
        }
        if (f >= min_brain_fraction) break;
    }

    PatchSample patch;
    patch.origin = best;
    patch.image_patch = sampling_detail::crop(subject.image, best, size);
    patch.seg_target = sampling_detail::crop(subject.tissue_labels, best, size);
    patch.global_age_target = subject.chronological_age;
    patch.voxel_age_target = Volume3D({size, size, size});
    patch.voxel_age_target.affine = patch.image_patch.affine;
    for (int64_t a = 0; a < size; ++a)
        for (int64_t b = 0; b < size; ++b)
            for (int64_t c = 0; c < size; ++c) {
                const int64_t src =
                    subject.image.index(best[0] + a, best[1] + b, best[2] + c);
                if (subject.brain_mask.data[src])
                    patch.voxel_age_target.at(a, b, c) = subject.voxel_age_at(src);
            }
    return patch;
}

namespace sampling_detail {

struct Rotation {
    int axis;        // rotation axis; the other two axes span the plane
    double cos_a, sin_a;
};

// maps an output voxel coordinate to its source location (inverse rotation
// about the volume centre)
inline std::array<double, 3> source_coord(const Rotation& rot, const std::array<double, 3>& centre,
                                          int64_t a, int64_t b, int64_t c) {
    std::array<double, 3> p = {static_cast<double>(a) - centre[0],
                               static_cast<double>(b) - centre[1],
                               static_cast<double>(c) - centre[2]};
    const int u = (rot.axis + 1) % 3, v = (rot.axis + 2) % 3;
    const double pu = rot.cos_a * p[u] + rot.sin_a * p[v];
    const double pv = -rot.sin_a * p[u] + rot.cos_a * p[v];
    p[u] = pu;
    p[v] = pv;
    return {p[0] + centre[0], p[1] + centre[1], p[2] + centre[2]};
}

template <class T>
double sample_trilinear(const VolumeGrid<T>& vol, const std::array<double, 3>& q) {
    const int64_t n0 = vol.shape[0], n1 = vol.shape[1], n2 = vol.shape[2];
    const double f0 = std::floor(q[0]), f1 = std::floor(q[1]), f2 = std::floor(q[2]);
    const int64_t i0 = static_cast<int64_t>(f0), i1 = static_cast<int64_t>(f1),
                  i2 = static_cast<int64_t>(f2);
    const double w0 = q[0] - f0, w1 = q[1] - f1, w2 = q[2] - f2;
    double acc = 0.0;
    for (int da = 0; da < 2; ++da)
        for (int db = 0; db < 2; ++db)
            for (int dc = 0; dc < 2; ++dc) {
                const int64_t a = i0 + da, b = i1 + db, c = i2 + dc;
                if (a < 0 || b < 0 || c < 0 || a >= n0 || b >= n1 || c >= n2) continue;  // zero fill
                const double w = (da ? w0 : 1.0 - w0) * (db ? w1 : 1.0 - w1) * (dc ? w2 : 1.0 - w2);
                acc += w * static_cast<double>(vol.at(a, b, c));
            }
    return acc;
}

template <class T>
T sample_nearest(const VolumeGrid<T>& vol, const std::array<double, 3>& q) {
    const int64_t a = static_cast<int64_t>(std::llround(q[0]));
    const int64_t b = static_cast<int64_t>(std::llround(q[1]));
    const int64_t c = static_cast<int64_t>(std::llround(q[2]));
    if (a < 0 || b < 0 || c < 0 || a >= vol.shape[0] || b >= vol.shape[1] || c >= vol.shape[2])
        return T(0);
    return vol.at(a, b, c);
}

}  // namespace sampling_detail

// Rotates a volume by angle_deg about a principal axis (through the grid
// centre). Trilinear interpolation unless nearest is set; zero fill outside.
template <class T>
VolumeGrid<T> rotate_volume(const VolumeGrid<T>& vol, double angle_deg, int axis, bool nearest) {
    require(axis >= 0 && axis < 3, "rotate_volume: axis must be 0, 1, or 2");
    sampling_detail::Rotation rot;
    rot.axis = axis;
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    rot.cos_a = std::cos(rad);
    rot.sin_a = std::sin(rad);
    const auto& shape = vol.shape;
    const std::array<double, 3> centre = {(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0,
                                          (shape[2] - 1) / 2.0};
    VolumeGrid<T> out = vol;
    for (int64_t a = 0; a < shape[0]; ++a)
        for (int64_t b = 0; b < shape[1]; ++b)
            for (int64_t c = 0; c < shape[2]; ++c) {
                const auto q = sampling_detail::source_coord(rot, centre, a, b, c);
                out.at(a, b, c) = nearest
                                      ? sampling_detail::sample_nearest(vol, q)
                                      : static_cast<T>(sampling_detail::sample_trilinear(vol, q));
            }
    return out;
}

// With the given probability, rotates image and targets by angle_deg about a
// randomly chosen principal axis. Trilinear interpolation for image and
// voxel-age map, nearest-neighbour for labels, zero fill outside.
inline PatchSample rotate_augment(const PatchSample& patch, double angle_deg, double probability,
                                  Rng& rng) {
    require(probability >= 0.0 && probability <= 1.0, "rotate_augment: probability must be in [0,1]");
    const double u = rng.uniform();
    if (u >= probability) return patch;

    const int axis = static_cast<int>(rng.uniform_index(3));
    PatchSample out = patch;
    out.image_patch = rotate_volume(patch.image_patch, angle_deg, axis, false);
    out.voxel_age_target = rotate_volume(patch.voxel_age_target, angle_deg, axis, false);
    out.seg_target = rotate_volume(patch.seg_target, angle_deg, axis, true);
    return out;
}

// Adds i.i.d. uniform noise in [low, high] to the voxel-age target inside the
// brain mask; background voxels untouched; ages clamped at zero.
inline Volume3D inject_label_noise(const Volume3D& voxel_age_target, const MaskVolume& brain_mask,
                                   double low, double high, Rng& rng) {
    require(low <= high, "inject_label_noise: low must be <= high");
    if (voxel_age_target.shape != brain_mask.shape)
        throw ValidationError("inject_label_noise: map and mask must share a grid");
    Volume3D out = voxel_age_target;
    for (int64_t i = 0; i < out.numel(); ++i) {
        if (!brain_mask.data[i]) continue;
        const double noisy = static_cast<double>(out.data[i]) + rng.uniform(low, high);
        out.data[i] = static_cast<float>(noisy < 0.0 ? 0.0 : noisy);
    }
    return out;
}

}  // namespace voxelage
