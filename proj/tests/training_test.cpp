// SPDX-License-Identifier: MIT
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "voxelage/evaluate.hpp"
#include "voxelage/phantom.hpp"
#include "voxelage/training.hpp"

using namespace voxelage;

namespace {

std::vector<Subject> small_cohort(int64_t n, int64_t size, uint64_t seed) {
    PhantomSpec spec;
    spec.size = size;
    spec.seed = seed;
    return generate_cohort(spec, n);
}

TrainConfig tiny_voxel_config(uint64_t seed) {
    TrainConfig cfg = TrainConfig::desk_voxel();
    cfg.epochs = 2;
    cfg.patch_size = 16;
    cfg.batch_size = 4;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST(LrSchedule, PaperValuesExactly) {
    TrainConfig voxel;  // 300 epochs, 1e-3, step 70
    EXPECT_EQ(lr_schedule(voxel, 0), 0.001);
    EXPECT_EQ(lr_schedule(voxel, 69), 0.001);
    EXPECT_EQ(lr_schedule(voxel, 70), 0.0005);
    EXPECT_EQ(lr_schedule(voxel, 140), 0.00025);

    TrainConfig global;
    global.model_kind = "global";
    global.epochs = 50;
    global.initial_lr = 1e-4;
    global.lr_step = 20;
    EXPECT_EQ(lr_schedule(global, 0), 0.0001);
    EXPECT_EQ(lr_schedule(global, 19), 0.0001);
    EXPECT_EQ(lr_schedule(global, 20), 0.00005);
    EXPECT_EQ(lr_schedule(global, 49), 0.000025);
}

TEST(LrSchedule, NonincreasingAndRangeChecked) {
    TrainConfig cfg;
    double prev = lr_schedule(cfg, 0);
    for (int64_t e = 1; e < cfg.epochs; e += 7) {
        const double lr = lr_schedule(cfg, e);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
    EXPECT_THROW(lr_schedule(cfg, -1), ValidationError);
    EXPECT_THROW(lr_schedule(cfg, cfg.epochs), ValidationError);
}

TEST(TrainVoxel, TwoEpochLogBookkeeping) {
    const auto cohort = small_cohort(8, 16, 3);
    auto [model, result] = train_voxel_model(cohort, tiny_voxel_config(5));
    ASSERT_EQ(result.log.rows.size(), 2u);
    for (const auto& row : result.log.rows) {
        EXPECT_TRUE(std::isfinite(row.dice_loss));
        EXPECT_TRUE(std::isfinite(row.mae_global));
        EXPECT_TRUE(std::isfinite(row.mae_voxel));
        EXPECT_TRUE(std::isfinite(row.total));
    }
    // epoch 0 runs with unit weights; later epochs refresh from the EMAs
    EXPECT_EQ(result.log.rows[0].alpha, 1.0);
    EXPECT_NE(result.log.rows[1].alpha, 1.0);
}

TEST(TrainVoxel, DeterministicLogsAcrossRuns) {
    const auto cohort = small_cohort(8, 16, 7);
    auto [model_a, result_a] = train_voxel_model(cohort, tiny_voxel_config(11));
    auto [model_b, result_b] = train_voxel_model(cohort, tiny_voxel_config(11));
    EXPECT_EQ(result_a.log.to_csv(), result_b.log.to_csv());

    auto [model_c, result_c] = train_voxel_model(cohort, tiny_voxel_config(12));
    EXPECT_NE(result_c.log.to_csv(), result_a.log.to_csv());
}

TEST(TrainVoxel, LogRecombinationIdentity) {
    const auto cohort = small_cohort(8, 16, 9);
    auto [model, result] = train_voxel_model(cohort, tiny_voxel_config(13));
    // recombine from the CSV text itself (full-precision round trip)
    std::istringstream csv(result.log.to_csv());
    std::string line;
    std::getline(csv, line);  // header
    int rows = 0;
    while (std::getline(csv, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        double epoch, dice, g, v, a, b, c, total;
        ls >> epoch >> dice >> g >> v >> a >> b >> c >> total;
        EXPECT_NEAR(total, a * dice + b * g + c * v, 1e-12);
        ++rows;
    }
    EXPECT_EQ(rows, 2);
}

TEST(TrainVoxel, ShortTrainingDescends) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 21;
    const auto cohort = generate_cohort(spec, 12);
    TrainConfig cfg = tiny_voxel_config(23);
    cfg.epochs = 6;
    auto [model, result] = train_voxel_model(cohort, cfg);
    EXPECT_LT(result.log.rows.back().total, result.log.rows.front().total);
}

TEST(TrainVoxel, CheckpointRoundTripBitwise) {
    TempDir dir("ckpt");
    const auto cohort = small_cohort(6, 16, 17);
    TrainConfig cfg = tiny_voxel_config(19);
    cfg.epochs = 1;
    auto [model, result] = train_voxel_model(cohort, cfg);

    save_checkpoint(model, dir.str("m"), CheckpointMeta{0, cfg.seed, result.log.to_json()});
    auto loaded = load_voxel_checkpoint<float>(dir.str("m"));

    Tensor<float> probe({1, 1, 16, 16, 16});
    Rng rng(29);
    for (auto& v : probe.v) v = static_cast<float>(rng.uniform());
    const auto a = model.forward(probe, false);
    const auto b = loaded.forward(probe, false);
    EXPECT_EQ(a.seg_probs.v, b.seg_probs.v);
    EXPECT_EQ(a.voxel_age.v, b.voxel_age.v);
    EXPECT_EQ(a.global_age, b.global_age);

    const Json manifest = load_checkpoint_manifest(dir.str("m"));
    EXPECT_EQ(manifest.at("kind"), "voxel");
    EXPECT_EQ(manifest.at("format_version"), checkpoint_format_version);
    EXPECT_EQ(manifest.at("rng_seed"), cfg.seed);
}

TEST(TrainVoxel, CheckpointFilesWrittenDuringTraining) {
    TempDir dir("train_out");
    const auto cohort = small_cohort(12, 16, 31);
    TrainConfig cfg = tiny_voxel_config(37);
    cfg.epochs = 2;
    cfg.checkpoint_interval = 1;
    auto [model, result] = train_voxel_model(cohort, cfg, dir.str());
    EXPECT_TRUE(std::filesystem::exists(dir.str("ckpt_final.bin")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("ckpt_final.json")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("ckpt_epoch0.bin")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("train_log.csv")));
    // 12 subjects -> one held out for validation -> best checkpoint exists
    EXPECT_TRUE(std::filesystem::exists(dir.str("ckpt_best.bin")));
    EXPECT_GE(result.best_epoch, 0);
}

TEST(TrainVoxel, WorkerCountDoesNotChangeResults) {
    const auto cohort = small_cohort(8, 16, 41);
    TrainConfig cfg = tiny_voxel_config(43);
    auto [model_a, result_a] = train_voxel_model(cohort, cfg);
    cfg.workers = 3;
    auto [model_b, result_b] = train_voxel_model(cohort, cfg);
    EXPECT_EQ(result_a.log.to_csv(), result_b.log.to_csv());
}

TEST(TrainGlobal, TwoEpochLogAndDeterminism) {
    const auto cohort = small_cohort(8, 32, 47);
    TrainConfig cfg = TrainConfig::desk_global();
    cfg.epochs = 2;
    cfg.seed = 53;
    auto [model_a, result_a] = train_global_model(cohort, cfg);
    ASSERT_EQ(result_a.log.rows.size(), 2u);
    for (const auto& row : result_a.log.rows) {
        EXPECT_TRUE(std::isfinite(row.mae_global));
        EXPECT_DOUBLE_EQ(row.total, row.mae_global);
    }
    auto [model_b, result_b] = train_global_model(cohort, cfg);
    EXPECT_EQ(result_a.log.to_csv(), result_b.log.to_csv());
}

TEST(PredictVoxel, WholeVolumeInvariants) {
    const auto cohort = small_cohort(1, 32, 59);
    VoxelModel<float> model(nn::UNetConfig::desk(), 61);
    const Subject prepared = prepare_subject(cohort[0]);
    const auto out = predict_voxel(model, prepared, 32);
    EXPECT_EQ(out.voxel_age.shape, prepared.image.shape);
    EXPECT_EQ(out.seg_probs.shape, (std::vector<int64_t>{4, 32, 32, 32}));
    for (float v : out.voxel_age.data) EXPECT_GE(v, 0.0f);
    const auto again = predict_voxel(model, prepared, 32);
    EXPECT_EQ(out.voxel_age.data, again.voxel_age.data);
    EXPECT_EQ(out.global_age, again.global_age);
}

TEST(PredictVoxel, SlidingWindowMatchesMeanBlendOracle) {
    PhantomSpec spec;
    spec.size = 48;
    spec.seed = 67;
    const Subject subject = prepare_subject(generate_phantom(spec, 55.0, "p48"));
    VoxelModel<float> model(nn::UNetConfig::desk(), 71);

    const auto blended = predict_voxel(model, subject, 32);

    // independent recount: run each 32^3 window forward, mean the overlaps
    const std::vector<int64_t> positions{0, 16};
    const int64_t w = 32, total = 48 * 48 * 48;
    std::vector<double> acc(static_cast<size_t>(total), 0.0);
    std::vector<int> cover(static_cast<size_t>(total), 0);
    std::vector<std::vector<float>> window_maps;
    std::vector<std::array<int64_t, 3>> window_origins;
    for (int64_t ox : positions)
        for (int64_t oy : positions)
            for (int64_t oz : positions) {
                Tensor<float> input({1, 1, w, w, w});
                for (int64_t a = 0; a < w; ++a)
                    for (int64_t b = 0; b < w; ++b)
                        for (int64_t c = 0; c < w; ++c)
                            input.v[static_cast<size_t>((a * w + b) * w + c)] =
                                subject.image.at(ox + a, oy + b, oz + c);
                auto out = model.forward(input, false);
                window_maps.push_back(
                    std::vector<float>(out.voxel_age.v.begin(), out.voxel_age.v.end()));
                window_origins.push_back({ox, oy, oz});
                for (int64_t a = 0; a < w; ++a)
                    for (int64_t b = 0; b < w; ++b)
                        for (int64_t c = 0; c < w; ++c) {
                            const int64_t dst = ((ox + a) * 48 + oy + b) * 48 + oz + c;
                            acc[static_cast<size_t>(dst)] += out.voxel_age.v[static_cast<size_t>((a * w + b) * w + c)];
                            cover[static_cast<size_t>(dst)] += 1;
                        }
            }
    double max_err = 0;
    for (int64_t i = 0; i < total; ++i)
        max_err = std::max(max_err,
                           std::abs(acc[static_cast<size_t>(i)] / cover[static_cast<size_t>(i)] -
                                    static_cast<double>(blended.voxel_age.data[static_cast<size_t>(i)])));
    EXPECT_LT(max_err, 1e-5);

    // max disagreement between overlapping windows bounds the blend's
    // deviation from any single window (no seam discontinuity beyond it)
    double max_disagreement = 0;
    for (size_t wi = 0; wi < window_maps.size(); ++wi)
        for (size_t wj = wi + 1; wj < window_maps.size(); ++wj)
            for (int64_t a = 0; a < w; ++a)
                for (int64_t b = 0; b < w; ++b)
                    for (int64_t c = 0; c < w; ++c) {
                        const int64_t ga = window_origins[wi][0] + a,
                                      gb = window_origins[wi][1] + b,
                                      gc = window_origins[wi][2] + c;
                        const int64_t a2 = ga - window_origins[wj][0],
                                      b2 = gb - window_origins[wj][1],
                                      c2 = gc - window_origins[wj][2];
                        if (a2 < 0 || b2 < 0 || c2 < 0 || a2 >= w || b2 >= w || c2 >= w) continue;
                        const double d =
                            std::abs(static_cast<double>(window_maps[wi][static_cast<size_t>((a * w + b) * w + c)]) -
                                     static_cast<double>(window_maps[wj][static_cast<size_t>((a2 * w + b2) * w + c2)]));
                        max_disagreement = std::max(max_disagreement, d);
                    }
    for (size_t wi = 0; wi < window_maps.size(); ++wi)
        for (int64_t a = 0; a < w; ++a)
            for (int64_t b = 0; b < w; ++b)
                for (int64_t c = 0; c < w; ++c) {
                    const int64_t dst = ((window_origins[wi][0] + a) * 48 + window_origins[wi][1] + b) * 48 +
                                        window_origins[wi][2] + c;
                    const double dev =
                        std::abs(static_cast<double>(blended.voxel_age.data[static_cast<size_t>(dst)]) -
                                 static_cast<double>(window_maps[wi][static_cast<size_t>((a * w + b) * w + c)]));
                    EXPECT_LE(dev, max_disagreement + 1e-5);
                }
}

TEST(PrepareSubject, ReorientsAndNormalizes) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 73;
    Subject s = generate_phantom(spec, 40.0, "p");
    // flip axis 0: prepare must restore canonical orientation
    Subject flipped = s;
    flipped.image.affine[0] = -1.0;
    flipped.brain_mask.affine[0] = -1.0;
    flipped.tissue_labels.affine[0] = -1.0;
    flipped.voxel_age.affine[0] = -1.0;
    for (int64_t a = 0; a < 16; ++a)
        for (int64_t b = 0; b < 16; ++b)
            for (int64_t c = 0; c < 16; ++c) {
                flipped.image.at(a, b, c) = s.image.at(15 - a, b, c);
                flipped.brain_mask.at(a, b, c) = s.brain_mask.at(15 - a, b, c);
                flipped.tissue_labels.at(a, b, c) = s.tissue_labels.at(15 - a, b, c);
                flipped.voxel_age.at(a, b, c) = s.voxel_age.at(15 - a, b, c);
            }
    const Subject prepared = prepare_subject(flipped);
    EXPECT_GT(prepared.image.affine[0], 0.0);
    EXPECT_EQ(prepared.brain_mask.data, s.brain_mask.data);
    float lo = 1e9f, hi = -1e9f;
    for (float v : prepared.image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    EXPECT_EQ(lo, 0.0f);
    EXPECT_EQ(hi, 1.0f);
}

TEST(ConfigJson, RoundTripAndValidation) {
    TrainConfig cfg = TrainConfig::desk_voxel();
    cfg.seed = 99;
    const Json j = to_json(cfg);
    const TrainConfig back = train_config_from_json(j);
    EXPECT_EQ(back.model_kind, cfg.model_kind);
    EXPECT_EQ(back.epochs, cfg.epochs);
    EXPECT_EQ(back.seed, cfg.seed);
    EXPECT_EQ(back.unet.levels, cfg.unet.levels);

    Json bad = j;
    bad["no_such_key"] = 1;
    EXPECT_THROW(train_config_from_json(bad), ValidationError);

    Json bad_model = j;
    bad_model["model"]["bogus"] = 2;
    EXPECT_THROW(train_config_from_json(bad_model), ValidationError);
}

TEST(ConfigJson, OverridesWithDottedKeys) {
    Json j = to_json(TrainConfig::desk_voxel());
    apply_override(j, "epochs=2");
    apply_override(j, "model.levels=2");
    apply_override(j, "model_kind=voxel");
    const TrainConfig cfg = train_config_from_json(j);
    EXPECT_EQ(cfg.epochs, 2);
    EXPECT_EQ(cfg.unet.levels, 2);
    EXPECT_THROW(apply_override(j, "nonsense"), ValidationError);
}
