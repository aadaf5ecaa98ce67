// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "voxelage/common.hpp"
#include "voxelage/nifti.hpp"
#include "voxelage/rng.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

// Deterministic synthetic "aging brain": concentric ellipsoidal shells
// (CSF/GM/WM outside-in) with a central ventricle that grows with age and a
// gray-matter intensity that dims with age. Age is therefore encoded in two
// independent channels, geometry and intensity.
struct RegionalOffset {
    int octant = 7;             // bit i set = upper half along axis i
    double offset_years = 5.0;  // added to the voxel-age ground truth inside the octant
};

struct PhantomSpec {
    int64_t size = 32;                   // voxels per axis
    std::array<double, 2> age_range{30.0, 80.0};
    double ventricle_growth_k = 0.04;    // voxels/year
    double gm_intensity_slope = -0.002;  // intensity/year
    double noise_sigma = 0.02;
    double ventricle_base_radius = 2.0;  // voxels at age zero
    std::optional<RegionalOffset> regional_offset;
    uint64_t seed = 0;

    void validate() const {
        require(size >= 16, "phantom size must be >= 16");
        require(age_range[0] < age_range[1], "phantom age_range must satisfy low < high");
        require(noise_sigma >= 0.0, "phantom noise_sigma must be >= 0");
    }
};

namespace phantom_detail {

inline bool in_octant(const std::array<int64_t, 3>& idx, int64_t size, int octant) {
    for (int axis = 0; axis < 3; ++axis) {
        const bool upper = idx[axis] >= size / 2;
        if (((octant >> axis) & 1) != static_cast<int>(upper)) return false;
    }
    return true;
}

}  // namespace phantom_detail

inline Subject generate_phantom(const PhantomSpec& spec, double age,
                                const std::string& subject_id = "phantom") {
    spec.validate();
    require(age >= spec.age_range[0] && age <= spec.age_range[1],
            "phantom age outside spec.age_range");

    const int64_t n = spec.size;
    Subject s;
    s.subject_id = subject_id;
    s.chronological_age = age;
    s.image = Volume3D({n, n, n});
    s.brain_mask = MaskVolume({n, n, n});
    s.tissue_labels = LabelVolume({n, n, n});
    s.voxel_age = Volume3D({n, n, n});

    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    const std::array<double, 3> semi = {0.42 * n, 0.40 * n, 0.38 * n};
    const double rv = spec.ventricle_base_radius + spec.ventricle_growth_k * age;
    const double gm_intensity = 0.55 + spec.gm_intensity_slope * age;

    Rng noise(derive_seed(spec.seed, std::bit_cast<uint64_t>(age)));

    std::array<int64_t, 3> idx{};
    for (idx[0] = 0; idx[0] < n; ++idx[0])
        for (idx[1] = 0; idx[1] < n; ++idx[1])
            for (idx[2] = 0; idx[2] < n; ++idx[2]) {
                const double d0 = (idx[0] - c) / semi[0];
                const double d1 = (idx[1] - c) / semi[1];
                const double d2 = (idx[2] - c) / semi[2];
                const double rho = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
                const double rc = std::sqrt((idx[0] - c) * (idx[0] - c) +
                                            (idx[1] - c) * (idx[1] - c) +
                                            (idx[2] - c) * (idx[2] - c));

                const int64_t flat = s.image.index(idx[0], idx[1], idx[2]);
                double intensity = 0.0;
                uint8_t label = kBackground;
                if (rho <= 1.0) {
                    if (rc <= rv) {
                        label = kCsf;  // ventricle
                        intensity = 0.2;
                    } else if (rho > 0.88) {
                        label = kCsf;
                        intensity = 0.2;
                    } else if (rho > 0.70) {
                        label = kGrayMatter;
                        intensity = gm_intensity;
                    } else {
                        label = kWhiteMatter;
                        intensity = 0.8;
                    }
                }
                if (spec.noise_sigma > 0) intensity += noise.normal(0.0, spec.noise_sigma);
                intensity = std::clamp(intensity, 0.0, 1.0);

                s.image.data[flat] = static_cast<float>(intensity);
                s.brain_mask.data[flat] = label != kBackground;
                s.tissue_labels.data[flat] = label;
                if (label != kBackground) {
                    double v = age;
                    if (spec.regional_offset &&
                        phantom_detail::in_octant(idx, n, spec.regional_offset->octant))
                        v += spec.regional_offset->offset_years;
                    s.voxel_age.data[flat] = static_cast<float>(v);
                }
            }
    return s;
}

inline std::vector<Subject> generate_cohort(const PhantomSpec& spec, int64_t n) {
    spec.validate();
    require(n >= 1, "cohort size must be >= 1");
    Rng ages(derive_seed(spec.seed, 0xc0407ull));
    std::vector<Subject> cohort;
    cohort.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double age = ages.uniform(spec.age_range[0], spec.age_range[1]);
        char id[32];
        std::snprintf(id, sizeof(id), "sub-%03lld", static_cast<long long>(i));
        cohort.push_back(generate_phantom(spec, age, id));
    }
    return cohort;
}

// Writes per-subject NIfTI files plus a manifest CSV naming them.
inline std::filesystem::path write_cohort(const std::vector<Subject>& cohort,
                                          const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create cohort directory: " + out_dir.string());
    const auto manifest_path = out_dir / "manifest.csv";
    std::ofstream manifest(manifest_path);
    if (!manifest) throw IoError("cannot write manifest: " + manifest_path.string());
    manifest << "subject_id,age_years,image,mask,labels,voxel_age\n";
    for (const auto& s : cohort) {
        const std::string img = s.subject_id + "_image.nii.gz";
        const std::string msk = s.subject_id + "_mask.nii.gz";
        const std::string lbl = s.subject_id + "_labels.nii.gz";
        const std::string vage = s.subject_id + "_voxelage.nii.gz";
        write_nifti(s.image, (out_dir / img).string());
        write_nifti(s.brain_mask.cast<float>(), (out_dir / msk).string());
        write_nifti(s.tissue_labels.cast<float>(), (out_dir / lbl).string());
        write_nifti(s.voxel_age, (out_dir / vage).string());
        char age_buf[32];
        std::snprintf(age_buf, sizeof(age_buf), "%.6f", s.chronological_age);
        manifest << s.subject_id << "," << age_buf << "," << img << "," << msk << "," << lbl << ","
                 << vage << "\n";
    }
    if (!manifest.good()) throw IoError("manifest write failure: " + manifest_path.string());
    return manifest_path;
}

// Loads a cohort previously written by write_cohort.
inline std::vector<Subject> read_cohort(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.csv";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw IoError("cannot read manifest: " + manifest_path.string());
    std::vector<Subject> cohort;
    std::string line;
    std::getline(manifest, line);  // header
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::array<std::string, 6> cols;
        size_t start = 0;
        for (int i = 0; i < 6; ++i) {
            const size_t comma = line.find(',', start);
            cols[i] = line.substr(start, comma == std::string::npos ? comma : comma - start);
            start = comma == std::string::npos ? line.size() : comma + 1;
        }
        Subject s;
        s.subject_id = cols[0];
        s.chronological_age = std::stod(cols[1]);
        s.image = read_nifti((dir / cols[2]).string());
        s.brain_mask = read_nifti((dir / cols[3]).string()).cast<uint8_t>();
        s.tissue_labels = read_nifti((dir / cols[4]).string()).cast<uint8_t>();
        s.voxel_age = read_nifti((dir / cols[5]).string());
        cohort.push_back(std::move(s));
    }
    return cohort;
}

}  // namespace voxelage
