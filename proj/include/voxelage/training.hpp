// SPDX-License-Identifier: MIT
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <string>
#include <vector>

#include "voxelage/config.hpp"
#include "voxelage/losses.hpp"
#include "voxelage/models.hpp"
#include "voxelage/nn/adam.hpp"
#include "voxelage/nn/checkpoint.hpp"
#include "voxelage/preprocess.hpp"
#include "voxelage/sampling.hpp"

namespace voxelage {

// Step schedule: initial_lr * lr_factor^floor(epoch / lr_step).
inline double lr_schedule(const TrainConfig& cfg, int64_t epoch) {
    require(epoch >= 0 && epoch < cfg.epochs, "lr_schedule: epoch out of range");
    return cfg.initial_lr * std::pow(cfg.lr_factor, static_cast<double>(epoch / cfg.lr_step));
}

struct TrainLogRow {
    int64_t epoch = 0;
    double dice_loss = 0, mae_global = 0, mae_voxel = 0;
    double alpha = 1, beta = 1, gamma = 1;
    double total = 0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;

    std::string to_csv() const {
        std::string out = "epoch,dice_loss,mae_global,mae_voxel,alpha,beta,gamma,total\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf),
                          "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          static_cast<long long>(r.epoch), r.dice_loss, r.mae_global, r.mae_voxel,
                          r.alpha, r.beta, r.gamma, r.total);
            out += buf;
        }
        return out;
    }

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write training log: " + path);
        f << to_csv();
        if (!f.good()) throw IoError("training log write failure: " + path);
    }

    Json to_json() const {
        Json arr = Json::array();
        for (const auto& r : rows)
            arr.push_back({r.epoch, r.dice_loss, r.mae_global, r.mae_voxel, r.alpha, r.beta,
                           r.gamma, r.total});
        return arr;
    }
};

struct TrainResult {
    TrainLog log;
    std::vector<double> val_history;  // per-epoch validation MAE, when a split exists
    double best_val = std::numeric_limits<double>::infinity();
    int64_t best_epoch = -1;
};

// Canonical orientation plus intensity normalization, the preprocessing the
// models expect.
inline Subject prepare_subject(const Subject& s) {
    Subject out = s;
    out.image = normalize_intensity(reorient_canonical(s.image));
    out.brain_mask = reorient_canonical(s.brain_mask);
    out.tissue_labels = reorient_canonical(s.tissue_labels);
    if (s.has_voxel_age()) out.voxel_age = reorient_canonical(s.voxel_age);
    return out;
}

namespace training_detail {

struct Batch {
    Tensor<float> images;         // (B,1,S,S,S)
    Tensor<uint8_t> labels;       // (B,S,S,S)
    Tensor<float> voxel_targets;  // (B,1,S,S,S)
    Tensor<uint8_t> masks;        // (B,S,S,S)
    std::vector<double> ages;     // B
};

inline PatchSample make_training_patch(const Subject& subject, const TrainConfig& cfg,
                                       uint64_t patch_seed) {
    Rng rng(patch_seed);
    PatchSample patch = random_crop(subject, cfg.patch_size, cfg.min_brain_fraction, rng);
    patch = rotate_augment(patch, cfg.augment_angle, cfg.augment_probability, rng);
    MaskVolume mask;
    mask.shape = patch.seg_target.shape;
    mask.affine = patch.seg_target.affine;
    mask.data.resize(patch.seg_target.data.size());
    for (size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = patch.seg_target.data[i] != 0;
    patch.voxel_age_target =
        inject_label_noise(patch.voxel_age_target, mask, cfg.label_noise[0], cfg.label_noise[1], rng);
    return patch;
}

inline Batch assemble_batch(const std::vector<const Subject*>& subjects,
                            const std::vector<uint64_t>& seeds, const TrainConfig& cfg) {
    const int64_t B = static_cast<int64_t>(subjects.size());
    const int64_t S = cfg.patch_size;
    std::vector<PatchSample> patches(static_cast<size_t>(B));
    if (cfg.workers > 1) {
        std::vector<std::future<PatchSample>> futs;
        for (int64_t i = 0; i < B; ++i)
            futs.push_back(std::async(std::launch::async, make_training_patch,
                                      std::cref(*subjects[static_cast<size_t>(i)]), std::cref(cfg),
                                      seeds[static_cast<size_t>(i)]));
        for (int64_t i = 0; i < B; ++i) patches[static_cast<size_t>(i)] = futs[static_cast<size_t>(i)].get();
    } else {
        for (int64_t i = 0; i < B; ++i)
            patches[static_cast<size_t>(i)] =
                make_training_patch(*subjects[static_cast<size_t>(i)], cfg, seeds[static_cast<size_t>(i)]);
    }

    Batch batch;
    batch.images.resize({B, 1, S, S, S});
    batch.labels.resize({B, S, S, S});
    batch.voxel_targets.resize({B, 1, S, S, S});
    batch.masks.resize({B, S, S, S});
    const int64_t n = S * S * S;
    for (int64_t i = 0; i < B; ++i) {
        const auto& p = patches[static_cast<size_t>(i)];
        std::copy(p.image_patch.data.begin(), p.image_patch.data.end(),
                  batch.images.v.begin() + i * n);
        std::copy(p.seg_target.data.begin(), p.seg_target.data.end(),
                  batch.labels.v.begin() + i * n);
        std::copy(p.voxel_age_target.data.begin(), p.voxel_age_target.data.end(),
                  batch.voxel_targets.v.begin() + i * n);
        for (int64_t k = 0; k < n; ++k)
            batch.masks.v[static_cast<size_t>(i * n + k)] = p.seg_target.data[static_cast<size_t>(k)] != 0;
        batch.ages.push_back(p.global_age_target);
    }
    return batch;
}

// seeded subject-level split: returns (train_indices, val_indices)
inline std::pair<std::vector<size_t>, std::vector<size_t>> validation_split(size_t n, double fraction,
                                                                            uint64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 0x76616cull));
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
    const size_t val_count = static_cast<size_t>(fraction * static_cast<double>(n));
    std::vector<size_t> val(idx.begin(), idx.begin() + static_cast<long>(val_count));
    std::vector<size_t> train(idx.begin() + static_cast<long>(val_count), idx.end());
    return {train, val};
}

}  // namespace training_detail

struct MultiTaskVolumeOutput {
    Tensor<float> seg_probs;  // (4, D, H, W)
    Volume3D voxel_age;       // years, aligned with the input
    double global_age = 0;    // years
};

// Whole-volume inference. Volumes larger than window_size are tiled with a
// half-window stride and overlapping voxel predictions are mean-blended.
template <class T>
MultiTaskVolumeOutput predict_voxel(VoxelModel<T>& model, const Subject& subject,
                                    int64_t window_size = 0) {
    const auto& shape = subject.image.shape;
    int64_t w = window_size > 0 ? window_size : std::min({shape[0], shape[1], shape[2]});
    w = std::min({w, shape[0], shape[1], shape[2]});

    auto positions = [&](int64_t extent) {
        std::vector<int64_t> pos;
        if (extent <= w) {
            pos.push_back(0);
            return pos;
        }
        const int64_t stride = std::max<int64_t>(1, w / 2);
        for (int64_t p = 0; p + w < extent; p += stride) pos.push_back(p);
        pos.push_back(extent - w);
        return pos;
    };
    const auto px = positions(shape[0]), py = positions(shape[1]), pz = positions(shape[2]);

    const int64_t total = shape[0] * shape[1] * shape[2];
    std::vector<double> seg_acc(static_cast<size_t>(4 * total), 0.0);
    std::vector<double> age_acc(static_cast<size_t>(total), 0.0);
    std::vector<int32_t> count(static_cast<size_t>(total), 0);
    double global_acc = 0;
    int64_t windows = 0;

    Tensor<T> input({1, 1, w, w, w});
    for (int64_t ox : px)
        for (int64_t oy : py)
            for (int64_t oz : pz) {
                for (int64_t a = 0; a < w; ++a)
                    for (int64_t b = 0; b < w; ++b)
                        for (int64_t c = 0; c < w; ++c)
                            input.v[static_cast<size_t>((a * w + b) * w + c)] =
                                static_cast<T>(subject.image.at(ox + a, oy + b, oz + c));
                auto out = model.forward(input, false);
                global_acc += static_cast<double>(out.global_age[0]);
                ++windows;
                for (int64_t a = 0; a < w; ++a)
                    for (int64_t b = 0; b < w; ++b)
                        for (int64_t c = 0; c < w; ++c) {
                            const int64_t dst =
                                ((ox + a) * shape[1] + oy + b) * shape[2] + oz + c;
                            const int64_t src = (a * w + b) * w + c;
                            age_acc[static_cast<size_t>(dst)] +=
                                static_cast<double>(out.voxel_age.v[static_cast<size_t>(src)]);
                            for (int64_t cls = 0; cls < 4; ++cls)
                                seg_acc[static_cast<size_t>(cls * total + dst)] += static_cast<double>(
                                    out.seg_probs.v[static_cast<size_t>(cls * w * w * w + src)]);
                            count[static_cast<size_t>(dst)] += 1;
                        }
            }

    MultiTaskVolumeOutput out;
    out.seg_probs.resize({4, shape[0], shape[1], shape[2]});
    out.voxel_age = Volume3D(shape);
    out.voxel_age.affine = subject.image.affine;
    for (int64_t i = 0; i < total; ++i) {
        const double c = static_cast<double>(count[static_cast<size_t>(i)]);
        out.voxel_age.data[static_cast<size_t>(i)] =
            static_cast<float>(age_acc[static_cast<size_t>(i)] / c);
        for (int64_t cls = 0; cls < 4; ++cls)
            out.seg_probs.v[static_cast<size_t>(cls * total + i)] =
                static_cast<float>(seg_acc[static_cast<size_t>(cls * total + i)] / c);
    }
    out.global_age = global_acc / static_cast<double>(windows);
    return out;
}

namespace training_detail {

template <class T>
double validation_voxel_mae(VoxelModel<T>& model, const std::vector<Subject>& subjects,
                            const std::vector<size_t>& val_idx, int64_t window) {
    double acc = 0;
    int64_t count = 0;
    for (size_t vi : val_idx) {
        const auto& s = subjects[vi];
        const auto out = predict_voxel(model, s, window);
        for (int64_t i = 0; i < s.image.numel(); ++i) {
            if (!s.brain_mask.data[static_cast<size_t>(i)]) continue;
            acc += std::abs(static_cast<double>(out.voxel_age.data[static_cast<size_t>(i)]) -
                            static_cast<double>(s.voxel_age_at(i)));
            ++count;
        }
    }
    return count > 0 ? acc / static_cast<double>(count) : 0.0;
}

}  // namespace training_detail

// Trains the multi-output U-Net on patch crops with rotation augmentation,
// label noise, the combined loss, and adaptive task weights refreshed at each
// epoch start. Fully deterministic for a fixed seed.
inline std::pair<VoxelModel<float>, TrainResult> train_voxel_model(
    const std::vector<Subject>& cohort, const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    require(cfg.model_kind == "voxel", "train_voxel_model: cfg.model_kind must be 'voxel'");
    require(!cohort.empty(), "train_voxel_model: empty cohort");

    std::vector<Subject> prepared;
    prepared.reserve(cohort.size());
    for (const auto& s : cohort) prepared.push_back(prepare_subject(s));

    auto [train_idx, val_idx] =
        training_detail::validation_split(prepared.size(), cfg.validation_fraction, cfg.seed);

    VoxelModel<float> model(cfg.unet, cfg.seed);
    nn::Adam<float> opt(model.graph().params());
    TaskEma ema;
    TrainResult result;

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(cfg, epoch);
        const LossWeights weights =
            ema.initialized ? update_task_weights(ema.values) : LossWeights{};

        // one random crop per subject per epoch, seeded shuffle
        std::vector<size_t> order = train_idx;
        Rng shuffle_rng(derive_seed(cfg.seed, static_cast<uint64_t>(epoch), 0x736875ull));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double sum_dice = 0, sum_g = 0, sum_v = 0;
        int64_t batches = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
            std::vector<const Subject*> subjects;
            std::vector<uint64_t> seeds;
            for (size_t k = pos; k < end; ++k) {
                subjects.push_back(&prepared[order[k]]);
                seeds.push_back(derive_seed(cfg.seed, static_cast<uint64_t>(epoch), order[k]));
            }
            auto batch = training_detail::assemble_batch(subjects, seeds, cfg);

            auto out = model.forward(batch.images, true);

            Tensor<float> g_seg, g_vox;
            std::vector<float> g_glob;
            const double dice = soft_dice_loss(out.seg_probs, batch.labels, &g_seg);
            const double g = mae_global(out.global_age, batch.ages, &g_glob);
            const double v = mae_voxel(out.voxel_age, batch.voxel_targets, batch.masks, &g_vox);

            for (auto& x : g_seg.v) x *= static_cast<float>(weights.alpha);
            for (auto& x : g_vox.v) x *= static_cast<float>(weights.gamma);
            Tensor<float> g_glob_t({static_cast<int64_t>(g_glob.size()), 1, 1, 1, 1});
            for (size_t i = 0; i < g_glob.size(); ++i)
                g_glob_t.v[i] = g_glob[i] * static_cast<float>(weights.beta);

            opt.zero_grad();
            model.backward_heads(&g_seg, &g_vox, &g_glob_t);
            opt.step(lr);

            ema.update(dice, g, v);
            sum_dice += dice;
            sum_g += g;
            sum_v += v;
            ++batches;
        }

        TrainLogRow row;
        row.epoch = epoch;
        row.dice_loss = sum_dice / static_cast<double>(batches);
        row.mae_global = sum_g / static_cast<double>(batches);
        row.mae_voxel = sum_v / static_cast<double>(batches);
        row.alpha = weights.alpha;
        row.beta = weights.beta;
        row.gamma = weights.gamma;
        row.total = row.alpha * row.dice_loss + row.beta * row.mae_global + row.gamma * row.mae_voxel;
        result.log.rows.push_back(row);

        if (!val_idx.empty()) {
            const double val =
                training_detail::validation_voxel_mae(model, prepared, val_idx, cfg.patch_size);
            result.val_history.push_back(val);
            if (val < result.best_val) {
                result.best_val = val;
                result.best_epoch = epoch;
                if (!out_dir.empty())
                    save_checkpoint(model, out_dir + "/ckpt_best",
                                    CheckpointMeta{epoch, cfg.seed, result.log.to_json()});
            }
        }
        if (!out_dir.empty() && cfg.checkpoint_interval > 0 &&
            (epoch + 1) % cfg.checkpoint_interval == 0)
            save_checkpoint(model, out_dir + "/ckpt_epoch" + std::to_string(epoch),
                            CheckpointMeta{epoch, cfg.seed, result.log.to_json()});
    }

    if (!out_dir.empty()) {
        save_checkpoint(model, out_dir + "/ckpt_final",
                        CheckpointMeta{cfg.epochs - 1, cfg.seed, result.log.to_json()});
        result.log.write_csv(out_dir + "/train_log.csv");
    }
    return {std::move(model), std::move(result)};
}

// Trains the SFCN regressor on whole normalized volumes with MAE loss (MSE
// behind the ablation flag) and 50% rotation augmentation.
inline std::pair<GlobalModel<float>, TrainResult> train_global_model(
    const std::vector<Subject>& cohort, const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    require(cfg.model_kind == "global", "train_global_model: cfg.model_kind must be 'global'");
    require(!cohort.empty(), "train_global_model: empty cohort");

    std::vector<Subject> prepared;
    prepared.reserve(cohort.size());
    for (const auto& s : cohort) prepared.push_back(prepare_subject(s));
    const auto& shape = prepared[0].image.shape;

    auto [train_idx, val_idx] =
        training_detail::validation_split(prepared.size(), cfg.validation_fraction, cfg.seed);

    GlobalModel<float> model(cfg.sfcn, cfg.seed);
    nn::Adam<float> opt(model.graph().params());
    TrainResult result;

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(cfg, epoch);

        std::vector<size_t> order = train_idx;
        Rng shuffle_rng(derive_seed(cfg.seed, static_cast<uint64_t>(epoch), 0x736875ull));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double sum_loss = 0;
        int64_t batches = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
            const int64_t B = static_cast<int64_t>(end - pos);
            Tensor<float> images({B, 1, shape[0], shape[1], shape[2]});
            std::vector<double> ages;
            const int64_t n = shape[0] * shape[1] * shape[2];
            for (size_t k = pos; k < end; ++k) {
                const auto& s = prepared[order[k]];
                Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(epoch), order[k]));
                Volume3D img = s.image;
                if (rng.uniform() < cfg.augment_probability) {
                    const int axis = static_cast<int>(rng.uniform_index(3));
                    img = rotate_volume(img, cfg.augment_angle, axis, false);
                }
                std::copy(img.data.begin(), img.data.end(),
                          images.v.begin() + static_cast<int64_t>(k - pos) * n);
                ages.push_back(s.chronological_age);
            }

            auto preds = model.forward(images, true);
            std::vector<float> grad;
            double loss;
            if (cfg.use_mse_global) {
                loss = 0;
                grad.assign(preds.size(), 0.0f);
                for (size_t i = 0; i < preds.size(); ++i) {
                    const double d = static_cast<double>(preds[i]) - ages[i];
                    loss += d * d;
                    grad[i] = static_cast<float>(2.0 * d / static_cast<double>(preds.size()));
                }
                loss /= static_cast<double>(preds.size());
            } else {
                loss = mae_global(preds, ages, &grad);
            }
            Tensor<float> seed({B, 1, 1, 1, 1});
            std::copy(grad.begin(), grad.end(), seed.v.begin());

            opt.zero_grad();
            model.backward_global(seed);
            opt.step(lr);

            sum_loss += loss;
            ++batches;
        }

        TrainLogRow row;
        row.epoch = epoch;
        row.mae_global = sum_loss / static_cast<double>(batches);
        row.alpha = 0;
        row.beta = 1;
        row.gamma = 0;
        row.total = row.alpha * row.dice_loss + row.beta * row.mae_global + row.gamma * row.mae_voxel;
        result.log.rows.push_back(row);

        if (!val_idx.empty()) {
            double val = 0;
            for (size_t vi : val_idx) {
                Tensor<float> input = volume_to_input<float>(prepared[vi].image);
                const auto pred = model.forward(input, false);
                val += std::abs(static_cast<double>(pred[0]) - prepared[vi].chronological_age);
            }
            val /= static_cast<double>(val_idx.size());
            result.val_history.push_back(val);
            if (val < result.best_val) {
                result.best_val = val;
                result.best_epoch = epoch;
                if (!out_dir.empty())
                    save_checkpoint(model, out_dir + "/ckpt_best",
                                    CheckpointMeta{epoch, cfg.seed, result.log.to_json()});
            }
        }
        if (!out_dir.empty() && cfg.checkpoint_interval > 0 &&
            (epoch + 1) % cfg.checkpoint_interval == 0)
            save_checkpoint(model, out_dir + "/ckpt_epoch" + std::to_string(epoch),
                            CheckpointMeta{epoch, cfg.seed, result.log.to_json()});
    }

    if (!out_dir.empty()) {
        save_checkpoint(model, out_dir + "/ckpt_final",
                        CheckpointMeta{cfg.epochs - 1, cfg.seed, result.log.to_json()});
        result.log.write_csv(out_dir + "/train_log.csv");
    }
    return {std::move(model), std::move(result)};
}

}  // namespace voxelage
