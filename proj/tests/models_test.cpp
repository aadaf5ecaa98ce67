// SPDX-License-Identifier: MIT
#include <gtest/gtest.h>

#include "voxelage/models.hpp"

using namespace voxelage;

namespace {

Tensor<float> random_batch(int64_t n, int64_t size, uint64_t seed) {
    Tensor<float> t({n, 1, size, size, size});
    Rng rng(seed);
    for (auto& v : t.v) v = static_cast<float>(rng.uniform());
    return t;
}

}  // namespace

TEST(VoxelModel, DeskOutputShapes) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 7);
    auto out = model.forward(random_batch(1, 32, 1), false);
    EXPECT_EQ(out.seg_probs.shape, (std::vector<int64_t>{1, 4, 32, 32, 32}));
    EXPECT_EQ(out.voxel_age.shape, (std::vector<int64_t>{1, 1, 32, 32, 32}));
    EXPECT_EQ(out.global_age.size(), 1u);
}

TEST(VoxelModel, SoftmaxSumsToOneAndAgeNonnegative) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 3);
    auto out = model.forward(random_batch(2, 32, 5), true);
    const int64_t S = 32 * 32 * 32;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < S; i += 97) {
            float sum = 0;
            for (int64_t c = 0; c < 4; ++c)
                sum += out.seg_probs.v[static_cast<size_t>((n * 4 + c) * S + i)];
            EXPECT_NEAR(sum, 1.0f, 1e-5f);
        }
    for (float v : out.voxel_age.v) EXPECT_GE(v, 0.0f);
}

TEST(VoxelModel, DeterministicInitialization) {
    VoxelModel<float> a(nn::UNetConfig::desk(), 42);
    VoxelModel<float> b(nn::UNetConfig::desk(), 42);
    auto pa = a.graph().params();
    auto pb = b.graph().params();
    ASSERT_EQ(pa.size(), pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i]->name, pb[i]->name);
        EXPECT_EQ(pa[i]->value.v, pb[i]->value.v);
    }
}

TEST(VoxelModel, DifferentSeedsDiffer) {
    VoxelModel<float> a(nn::UNetConfig::desk(), 1);
    VoxelModel<float> b(nn::UNetConfig::desk(), 2);
    const auto batch = random_batch(1, 32, 9);
    const auto oa = a.forward(batch, false);
    const auto ob = b.forward(batch, false);
    EXPECT_NE(oa.voxel_age.v, ob.voxel_age.v);
}

TEST(VoxelModel, ParameterCountMatchesClosedForm) {
    const auto cfg = nn::UNetConfig::desk();
    VoxelModel<float> model(cfg, 0);
    EXPECT_EQ(model.graph().param_count(), nn::unet_param_count(cfg));
    // independent hand tally for the desk configuration
    EXPECT_EQ(model.graph().param_count(), 402110);

    nn::UNetConfig big;
    big.levels = 4;
    big.base_channels = 16;
    VoxelModel<float> paper_scale(big, 0);
    EXPECT_EQ(paper_scale.graph().param_count(), nn::unet_param_count(big));
}

TEST(VoxelModel, EvalForwardIsPure) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 11);
    const auto batch = random_batch(1, 32, 13);
    const auto a = model.forward(batch, false);
    const auto b = model.forward(batch, false);
    EXPECT_EQ(a.seg_probs.v, b.seg_probs.v);
    EXPECT_EQ(a.voxel_age.v, b.voxel_age.v);
    EXPECT_EQ(a.global_age, b.global_age);
}

TEST(VoxelModel, EvalBatchIndependence) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 17);
    const auto single = random_batch(1, 32, 19);
    Tensor<float> doubled({2, 1, 32, 32, 32});
    std::copy(single.v.begin(), single.v.end(), doubled.v.begin());
    std::copy(single.v.begin(), single.v.end(), doubled.v.begin() + single.numel());

    const auto one = model.forward(single, false);
    const auto two = model.forward(doubled, false);
    const int64_t S = 32 * 32 * 32;
    for (int64_t i = 0; i < S; ++i) {
        EXPECT_EQ(two.voxel_age.v[static_cast<size_t>(i)], one.voxel_age.v[static_cast<size_t>(i)]);
        EXPECT_EQ(two.voxel_age.v[static_cast<size_t>(S + i)],
                  one.voxel_age.v[static_cast<size_t>(i)]);
    }
    EXPECT_EQ(two.global_age[0], one.global_age[0]);
    EXPECT_EQ(two.global_age[1], one.global_age[0]);
}

TEST(VoxelModel, CaptureFinalEncoderStageShape) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 23);
    const auto acts = model.capture_activations(random_batch(1, 32, 29), {"enc2", "bottleneck"});
    ASSERT_TRUE(acts.count("enc2"));
    EXPECT_EQ(acts.at("enc2").shape, (std::vector<int64_t>{1, 32, 4, 4, 4}));
    EXPECT_EQ(acts.at("bottleneck").shape, (std::vector<int64_t>{1, 64, 4, 4, 4}));
}

TEST(VoxelModel, CaptureEmptyListAndUnknownHandle) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 31);
    const auto batch = random_batch(1, 32, 37);
    EXPECT_TRUE(model.capture_activations(batch, {}).empty());
    EXPECT_THROW(model.capture_activations(batch, {"enc99"}), LookupError);
}

TEST(VoxelModel, CaptureIsDeterministic) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 41);
    const auto batch = random_batch(1, 32, 43);
    const auto a = model.capture_activations(batch, {"enc1"});
    const auto b = model.capture_activations(batch, {"enc1"});
    EXPECT_EQ(a.at("enc1").v, b.at("enc1").v);
}

TEST(VoxelModel, IncompatibleInputSizeRejected) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 47);
    EXPECT_THROW(model.forward(random_batch(1, 20, 1), false), ValidationError);
}

TEST(VoxelModel, RoiTargetValidation) {
    VoxelModel<float> model(nn::UNetConfig::desk(), 53);
    const auto batch = random_batch(1, 32, 59);
    MaskVolume empty_roi({32, 32, 32}, 0);
    EXPECT_THROW(model.input_gradient(batch, ScalarTarget::voxel_age_over(empty_roi)),
                 ValidationError);
    MaskVolume roi({32, 32, 32}, 0);
    roi.data[123] = 1;
    const auto grad = model.input_gradient(batch, ScalarTarget::voxel_age_over(roi));
    EXPECT_EQ(grad.shape, batch.shape);
}

TEST(GlobalModel, PoolsDownToScalar) {
    GlobalModel<float> model(nn::SFCNConfig::desk(), 7);
    const auto batch = random_batch(1, 32, 61);
    const auto preds = model.forward(batch, false);
    ASSERT_EQ(preds.size(), 1u);
    // block5 output is 1^3 after five pools
    const auto acts = model.capture_activations(batch, {"block5", "block6"});
    EXPECT_EQ(acts.at("block5").shape, (std::vector<int64_t>{1, 256, 1, 1, 1}));
    EXPECT_EQ(acts.at("block6").shape, (std::vector<int64_t>{1, 64, 1, 1, 1}));
}

TEST(GlobalModel, SevenConvStages) {
    const nn::SFCNConfig cfg;
    EXPECT_EQ(cfg.conv_stage_count(), 7);
    EXPECT_EQ(cfg.pooled_blocks(), 5);
    EXPECT_EQ(cfg.min_input_extent(), 32);
}

TEST(GlobalModel, DifferentSeedsDifferentOutputs) {
    const auto batch = random_batch(1, 32, 67);
    GlobalModel<float> a(nn::SFCNConfig::desk(), 1);
    GlobalModel<float> b(nn::SFCNConfig::desk(), 2);
    EXPECT_NE(a.forward(batch, false)[0], b.forward(batch, false)[0]);
}

TEST(GlobalModel, TooSmallInputRejected) {
    GlobalModel<float> model(nn::SFCNConfig::desk(), 3);
    EXPECT_THROW(model.forward(random_batch(1, 16, 1), false), ValidationError);
}

TEST(GlobalModel, RoiTargetRejected) {
    GlobalModel<float> model(nn::SFCNConfig::desk(), 5);
    MaskVolume roi({32, 32, 32}, 1);
    EXPECT_THROW(model.input_gradient(random_batch(1, 32, 1),
                                      ScalarTarget::voxel_age_over(roi)),
                 ValidationError);
}
