// SPDX-License-Identifier: MIT
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "voxelage/imageio.hpp"
#include "voxelage/training.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

// Predicted-age-difference mask: predicted voxel age minus chronological age
// inside the brain, zero outside. Positive = older-looking tissue.
struct PADMask {
    Volume3D map;  // years
    MaskVolume brain_mask;
    std::string subject_id;
    double chronological_age = 0;
};

inline PADMask compute_pad(const Volume3D& pred_voxel_age, double chronological_age,
                           const MaskVolume& brain_mask, const std::string& subject_id = "") {
    if (pred_voxel_age.shape != brain_mask.shape)
        throw ValidationError("compute_pad: prediction and mask must share a grid");
    PADMask pad;
    pad.map = Volume3D(pred_voxel_age.shape);
    pad.map.affine = pred_voxel_age.affine;
    pad.brain_mask = brain_mask;
    pad.subject_id = subject_id;
    pad.chronological_age = chronological_age;
    for (int64_t i = 0; i < pred_voxel_age.numel(); ++i)
        if (brain_mask.data[static_cast<size_t>(i)])
            pad.map.data[static_cast<size_t>(i)] =
                pred_voxel_age.data[static_cast<size_t>(i)] - static_cast<float>(chronological_age);
    return pad;
}

inline LabelVolume seg_argmax(const Tensor<float>& seg_probs) {
    require(seg_probs.rank() == 4, "seg_argmax: expected (C,D,H,W)");
    const int64_t C = seg_probs.shape[0];
    const int64_t S = seg_probs.shape[1] * seg_probs.shape[2] * seg_probs.shape[3];
    LabelVolume labels({seg_probs.shape[1], seg_probs.shape[2], seg_probs.shape[3]});
    for (int64_t i = 0; i < S; ++i) {
        int best = 0;
        float best_p = seg_probs.v[static_cast<size_t>(i)];
        for (int64_t c = 1; c < C; ++c)
            if (seg_probs.v[static_cast<size_t>(c * S + i)] > best_p) {
                best_p = seg_probs.v[static_cast<size_t>(c * S + i)];
                best = static_cast<int>(c);
            }
        labels.data[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return labels;
}

// Hard (argmax) Dice per tissue class. A class absent from both prediction
// and ground truth scores 1.
inline std::array<double, 3> hard_dice(const Tensor<float>& seg_probs, const LabelVolume& target) {
    const LabelVolume pred = seg_argmax(seg_probs);
    if (pred.shape != target.shape) throw ValidationError("hard_dice: shape mismatch");
    std::array<double, 3> dice{};
    for (int cls = 1; cls <= 3; ++cls) {
        int64_t inter = 0, psz = 0, gsz = 0;
        for (size_t i = 0; i < pred.data.size(); ++i) {
            const bool p = pred.data[i] == cls;
            const bool g = target.data[i] == cls;
            inter += p && g;
            psz += p;
            gsz += g;
        }
        dice[static_cast<size_t>(cls - 1)] =
            (psz + gsz) == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(psz + gsz);
    }
    return dice;
}

struct MetricsRow {
    std::string subject_id;
    double global_mae = std::numeric_limits<double>::quiet_NaN();
    double voxel_mae = std::numeric_limits<double>::quiet_NaN();
    double dice_gm = std::numeric_limits<double>::quiet_NaN();
    double dice_wm = std::numeric_limits<double>::quiet_NaN();
    double dice_csf = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
    std::vector<MetricsRow> rows;

    // mean and sample SD per column, ignoring NaN entries
    std::array<double, 5> mean() const { return aggregate(true); }
    std::array<double, 5> sd() const { return aggregate(false); }

    std::string to_csv() const {
        std::string out = "subject_id,global_mae,voxel_mae,dice_gm,dice_wm,dice_csf\n";
        auto fmt = [](double v) {
            if (std::isnan(v)) return std::string();
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.9g", v);
            return std::string(buf);
        };
        for (const auto& r : rows)
            out += r.subject_id + "," + fmt(r.global_mae) + "," + fmt(r.voxel_mae) + "," +
                   fmt(r.dice_gm) + "," + fmt(r.dice_wm) + "," + fmt(r.dice_csf) + "\n";
        const auto m = mean();
        const auto s = sd();
        out += "mean";
        for (double v : m) out += "," + fmt(v);
        out += "\nsd";
        for (double v : s) out += "," + fmt(v);
        out += "\n";
        return out;
    }

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write metrics: " + path);
        f << to_csv();
        if (!f.good()) throw IoError("metrics write failure: " + path);
    }

private:
    std::array<double, 5> aggregate(bool want_mean) const {
        std::array<double, 5> out;
        for (int col = 0; col < 5; ++col) {
            std::vector<double> vals;
            for (const auto& r : rows) {
                const double v = col == 0   ? r.global_mae
                                 : col == 1 ? r.voxel_mae
                                 : col == 2 ? r.dice_gm
                                 : col == 3 ? r.dice_wm
                                            : r.dice_csf;
                if (!std::isnan(v)) vals.push_back(v);
            }
            if (vals.empty()) {
                out[static_cast<size_t>(col)] = std::numeric_limits<double>::quiet_NaN();
                continue;
            }
            double m = 0;
            for (double v : vals) m += v;
            m /= static_cast<double>(vals.size());
            if (want_mean) {
                out[static_cast<size_t>(col)] = m;
            } else if (vals.size() < 2) {
                out[static_cast<size_t>(col)] = 0.0;
            } else {
                double acc = 0;
                for (double v : vals) acc += (v - m) * (v - m);
                out[static_cast<size_t>(col)] = std::sqrt(acc / static_cast<double>(vals.size() - 1));
            }
        }
        return out;
    }
};

// Cohort evaluation against any whole-volume predictor with the voxel-model
// output shape; the oracle predictors in the tests plug in here too.
template <class PredictFn>
MetricsReport evaluate_cohort_with(const std::vector<Subject>& subjects, PredictFn&& predict) {
    require(!subjects.empty(), "evaluate_cohort: empty cohort");
    MetricsReport report;
    for (const auto& s : subjects) {
        const MultiTaskVolumeOutput out = predict(s);
        MetricsRow row;
        row.subject_id = s.subject_id;
        row.global_mae = std::abs(out.global_age - s.chronological_age);
        double acc = 0;
        int64_t count = 0;
        for (int64_t i = 0; i < s.image.numel(); ++i) {
            if (!s.brain_mask.data[static_cast<size_t>(i)]) continue;
            acc += std::abs(static_cast<double>(out.voxel_age.data[static_cast<size_t>(i)]) -
                            static_cast<double>(s.voxel_age_at(i)));
            ++count;
        }
        row.voxel_mae = count ? acc / static_cast<double>(count) : 0.0;
        const auto dice = hard_dice(out.seg_probs, s.tissue_labels);
        row.dice_gm = dice[0];
        row.dice_wm = dice[1];
        row.dice_csf = dice[2];
        report.rows.push_back(row);
    }
    return report;
}

template <class T>
MetricsReport evaluate_cohort(VoxelModel<T>& model, const std::vector<Subject>& subjects,
                              int64_t window = 0) {
    return evaluate_cohort_with(subjects,
                                [&](const Subject& s) { return predict_voxel(model, s, window); });
}

template <class T>
MetricsReport evaluate_cohort_global(GlobalModel<T>& model, const std::vector<Subject>& subjects) {
    require(!subjects.empty(), "evaluate_cohort: empty cohort");
    MetricsReport report;
    for (const auto& s : subjects) {
        Tensor<T> input = volume_to_input<T>(s.image);
        const auto pred = model.forward(input, false);
        MetricsRow row;
        row.subject_id = s.subject_id;
        row.global_mae = std::abs(static_cast<double>(pred[0]) - s.chronological_age);
        report.rows.push_back(row);
    }
    return report;
}

// Renders one slice to an 8-bit RGB PNG. The diverging map is centred at
// zero with a symmetric range (default: max |value| over the slice's volume,
// which for PAD masks equals the brain extremum since PAD is zero outside).
inline void export_slice(const Volume3D& vol, int axis, int64_t index, Colormap colormap,
                         std::optional<double> symmetric_range, const std::string& path) {
    require(axis >= 0 && axis < 3, "export_slice: axis must be 0, 1, or 2");
    require(index >= 0 && index < vol.shape[axis], "export_slice: index out of range");

    const int r_axis = axis == 0 ? 1 : 0;
    const int c_axis = axis == 2 ? 1 : 2;
    const int64_t height = vol.shape[r_axis], width = vol.shape[c_axis];

    auto value_at = [&](int64_t r, int64_t c) {
        std::array<int64_t, 3> idx{};
        idx[static_cast<size_t>(axis)] = index;
        idx[static_cast<size_t>(r_axis)] = r;
        idx[static_cast<size_t>(c_axis)] = c;
        return vol.at(idx[0], idx[1], idx[2]);
    };

    std::vector<uint8_t> rgb(static_cast<size_t>(width * height * 3));
    if (colormap == Colormap::DivergingBlueWhiteRed) {
        double range = 0;
        if (symmetric_range) {
            require(*symmetric_range >= 0, "export_slice: symmetric_range must be >= 0");
            range = *symmetric_range;
        } else {
            for (float v : vol.data) range = std::max(range, std::abs(static_cast<double>(v)));
        }
        for (int64_t r = 0; r < height; ++r)
            for (int64_t c = 0; c < width; ++c) {
                const double v = value_at(r, c);
                const double t = range > 0 ? (v / range + 1.0) / 2.0 : 0.5;
                const auto px = colormap_rgb(colormap, t);
                std::copy(px.begin(), px.end(), rgb.begin() + (r * width + c) * 3);
            }
    } else {
        float lo = vol.data[0], hi = vol.data[0];
        for (float v : vol.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double span = hi > lo ? static_cast<double>(hi) - lo : 1.0;
        for (int64_t r = 0; r < height; ++r)
            for (int64_t c = 0; c < width; ++c) {
                const double t = (value_at(r, c) - lo) / span;
                const auto px = colormap_rgb(colormap, t);
                std::copy(px.begin(), px.end(), rgb.begin() + (r * width + c) * 3);
            }
    }
    write_png_rgb(path, width, height, rgb);
}

}  // namespace voxelage
