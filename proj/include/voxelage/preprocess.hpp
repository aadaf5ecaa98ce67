// SPDX-License-Identifier: MIT
#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "voxelage/common.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

// Permutes/flips axes (no resampling) so that each voxel axis is aligned with
// its dominant world direction, signs positive: a stand-in for template
// reorientation when the input is already axis-aligned up to permutation.
template <class T>
VolumeGrid<T> reorient_canonical(const VolumeGrid<T>& vol) {
    vol.validate("reorient input");
    const Affine& a = vol.affine;

    // dominant world row and sign per voxel axis
    std::array<int, 3> dom{}, sign{};
    std::array<bool, 3> row_taken{false, false, false};
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        auto mag = [&](int j) {
            return std::max({std::abs(a[0 + j]), std::abs(a[4 + j]), std::abs(a[8 + j])});
        };
        return mag(x) > mag(y);
    });
    for (int j : order) {
        int best = -1;
        double best_mag = -1.0;
        for (int i = 0; i < 3; ++i) {
            if (row_taken[i]) continue;
            const double m = std::abs(a[4 * i + j]);
            if (m > best_mag) {
                best_mag = m;
                best = i;
            }
        }
        dom[j] = best;
        sign[j] = a[4 * best + j] < 0 ? -1 : 1;
        row_taken[best] = true;
    }

    // source axis and flip for each destination axis
    std::array<int, 3> src{};
    std::array<bool, 3> flip{};
    for (int j = 0; j < 3; ++j) {
        src[dom[j]] = j;
        flip[dom[j]] = sign[j] < 0;
    }

    bool already = true;
    for (int j = 0; j < 3; ++j)
        if (src[j] != j || flip[j]) already = false;
    if (already) return vol;

    VolumeGrid<T> out;
    out.shape = {vol.shape[src[0]], vol.shape[src[1]], vol.shape[src[2]]};
    out.data.resize(static_cast<size_t>(vol.numel()));

    out.affine = identity_affine();
    for (int j = 0; j < 3; ++j) {
        const int p = src[j];
        const double s = flip[j] ? -1.0 : 1.0;
        for (int i = 0; i < 3; ++i) out.affine[4 * i + j] = s * a[4 * i + p];
        // translation picks up the flipped end of the axis
        if (flip[j])
            for (int i = 0; i < 3; ++i)
                out.affine[4 * i + 3] += a[4 * i + p] * static_cast<double>(vol.shape[p] - 1);
    }
    for (int i = 0; i < 3; ++i) out.affine[4 * i + 3] += a[4 * i + 3];

    std::array<int64_t, 3> idx{};
    for (idx[0] = 0; idx[0] < out.shape[0]; ++idx[0])
        for (idx[1] = 0; idx[1] < out.shape[1]; ++idx[1])
            for (idx[2] = 0; idx[2] < out.shape[2]; ++idx[2]) {
                std::array<int64_t, 3> old{};
                for (int j = 0; j < 3; ++j) {
                    const int p = src[j];
                    old[p] = flip[j] ? vol.shape[p] - 1 - idx[j] : idx[j];
                }
                out.at(idx[0], idx[1], idx[2]) = vol.at(old[0], old[1], old[2]);
            }
    return out;
}

// Min-max rescale to [0,1]; a constant volume maps to all zeros.
inline Volume3D normalize_intensity(const Volume3D& vol) {
    vol.validate("normalize input");
    float lo = vol.data[0], hi = vol.data[0];
    for (float v : vol.data) {
        if (!std::isfinite(v)) throw ValidationError("normalize_intensity: NaN/Inf in volume");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Volume3D out = vol;
    if (hi == lo) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const float scale = 1.0f / (hi - lo);
    for (float& v : out.data) v = (v - lo) * scale;
    return out;
}

}  // namespace voxelage
