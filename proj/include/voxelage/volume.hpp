// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxelage/common.hpp"

namespace voxelage {

using Affine = std::array<double, 16>;  // row-major 4x4, voxel index -> world mm

inline Affine identity_affine() {
    return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

inline double affine_det3(const Affine& a) {
    return a[0] * (a[5] * a[10] - a[6] * a[9]) - a[1] * (a[4] * a[10] - a[6] * a[8]) +
           a[2] * (a[4] * a[9] - a[5] * a[8]);
}

// 3D scalar field over a voxel grid. Axis order is (i0,i1,i2) with i2
// contiguous in memory; affine column j gives the world step along axis j.
template <class T>
struct VolumeGrid {
    std::array<int64_t, 3> shape{0, 0, 0};
    Affine affine = identity_affine();
    std::vector<T> data;

    VolumeGrid() = default;
    VolumeGrid(std::array<int64_t, 3> s, T fill = T(0)) : shape(s) {
        data.assign(static_cast<size_t>(numel()), fill);
    }

    int64_t numel() const { return shape[0] * shape[1] * shape[2]; }

    int64_t index(int64_t a, int64_t b, int64_t c) const { return (a * shape[1] + b) * shape[2] + c; }

    T& at(int64_t a, int64_t b, int64_t c) { return data[index(a, b, c)]; }
    const T& at(int64_t a, int64_t b, int64_t c) const { return data[index(a, b, c)]; }

    std::array<double, 3> spacing() const {
        std::array<double, 3> s;
        for (int j = 0; j < 3; ++j)
            s[j] = std::sqrt(affine[j] * affine[j] + affine[4 + j] * affine[4 + j] +
                             affine[8 + j] * affine[8 + j]);
        return s;
    }

    bool same_grid(const VolumeGrid& o) const { return shape == o.shape; }

    void validate(const char* what = "volume") const {
        if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
            throw ValidationError(std::string(what) + ": non-positive shape");
        if (static_cast<int64_t>(data.size()) != numel())
            throw ValidationError(std::string(what) + ": data size does not match shape");
        if (std::abs(affine_det3(affine)) < 1e-12)
            throw ValidationError(std::string(what) + ": affine is singular");
        for (double s : spacing())
            if (!(s > 0)) throw ValidationError(std::string(what) + ": non-positive spacing");
    }

    template <class U>
    VolumeGrid<U> cast() const {
        VolumeGrid<U> out;
        out.shape = shape;
        out.affine = affine;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Volume3D = VolumeGrid<float>;
using LabelVolume = VolumeGrid<uint8_t>;  // {0:background, 1:GM, 2:WM, 3:CSF}
using MaskVolume = VolumeGrid<uint8_t>;   // 1 = brain tissue

enum TissueLabel : uint8_t { kBackground = 0, kGrayMatter = 1, kWhiteMatter = 2, kCsf = 3 };

struct Subject {
    std::string subject_id;
    Volume3D image;
    double chronological_age = 0.0;  // years
    MaskVolume brain_mask;
    LabelVolume tissue_labels;
    // Per-voxel ground-truth age, present when the data source defines a
    // spatially varying age (phantoms with a regional offset). When empty the
    // voxel-age target is the chronological age at every brain voxel.
    Volume3D voxel_age;

    bool has_voxel_age() const { return !voxel_age.data.empty(); }

    float voxel_age_at(int64_t flat) const {
        return has_voxel_age() ? voxel_age.data[flat] : static_cast<float>(chronological_age);
    }

    void validate() const {
        image.validate("subject image");
        brain_mask.validate("brain mask");
        tissue_labels.validate("tissue labels");
        if (!(chronological_age >= 0)) throw ValidationError("chronological_age must be >= 0");
        if (brain_mask.shape != image.shape || tissue_labels.shape != image.shape)
            throw ValidationError("subject volumes must share a grid");
        if (has_voxel_age() && voxel_age.shape != image.shape)
            throw ValidationError("voxel_age must share the image grid");
        for (int64_t i = 0; i < image.numel(); ++i) {
            const bool in_brain = brain_mask.data[i] != 0;
            const bool labeled = tissue_labels.data[i] != 0;
            if (in_brain != labeled)
                throw ValidationError("tissue_labels must be nonzero exactly where brain_mask is 1");
        }
    }
};

struct PatchSample {
    Volume3D image_patch;
    LabelVolume seg_target;
    Volume3D voxel_age_target;     // years
    double global_age_target = 0;  // years
    std::array<int64_t, 3> origin{0, 0, 0};

    // Brain membership inside a patch is carried by the segmentation target:
    // labels are nonzero exactly on brain voxels.
    bool in_brain(int64_t flat) const { return seg_target.data[flat] != 0; }
};

}  // namespace voxelage
