// SPDX-License-Identifier: MIT
#pragma once

#include <memory>
#include <string>

#include "voxelage/nn/graph.hpp"

namespace voxelage::nn {

// Multi-output 3D U-Net. Encoder stages double the channel width and halve
// the resolution (the named stage output "enc{i}" is the pooled tensor fed
// downstream); the bottleneck sits after the last pool. Batch normalization
// in the encoder and bottleneck only. Three heads: per-voxel softmax
// segmentation, ReLU voxel-age, and a linear global-age readout of the
// pooled bottleneck features.
struct UNetConfig {
    int64_t levels = 4;
    int64_t base_channels = 16;
    int64_t in_channels = 1;
    int64_t seg_classes = 4;
    double age_output_scale = 100.0;

    static UNetConfig desk() {
        UNetConfig cfg;
        cfg.levels = 3;
        cfg.base_channels = 8;
        return cfg;
    }

    void validate() const {
        require(levels >= 2, "unet: levels must be >= 2");
        require(base_channels >= 1 && in_channels >= 1 && seg_classes >= 2, "unet: bad config");
        require(age_output_scale > 0, "unet: age_output_scale must be positive");
    }

    int64_t channels_at(int64_t level) const { return base_channels << level; }
    // spatial extents must be divisible by this for the decoder to mirror the
    // encoder exactly
    int64_t size_divisor() const { return int64_t(1) << levels; }
};

namespace unet_detail {

template <class T>
int conv_bn_relu(Graph<T>& g, int in, int64_t ci, int64_t co, const std::string& name, Rng& rng,
                 const std::string& out_name = "") {
    auto conv = std::make_unique<Conv3d<T>>(ci, co, name);
    init_conv_weights(conv->params()[0]->value, ci * 27, rng);
    int e = g.add(std::move(conv), {in}, name + "_raw");
    e = g.add(std::make_unique<BatchNorm3d<T>>(co, name), {e}, name + "_bn");
    return g.add(std::make_unique<ReLU<T>>(), {e}, out_name.empty() ? name : out_name);
}

template <class T>
int conv_relu(Graph<T>& g, int in, int64_t ci, int64_t co, const std::string& name, Rng& rng) {
    auto conv = std::make_unique<Conv3d<T>>(ci, co, name);
    init_conv_weights(conv->params()[0]->value, ci * 27, rng);
    int e = g.add(std::move(conv), {in}, name + "_raw");
    return g.add(std::make_unique<ReLU<T>>(), {e}, name);
}

}  // namespace unet_detail

template <class T>
struct UNetEdges {
    int input = -1;
    int seg_probs = -1;
    int voxel_age = -1;
    int global_age = -1;
    int bottleneck = -1;
};

template <class T>
UNetEdges<T> build_unet_graph(Graph<T>& g, const UNetConfig& cfg, Rng& rng) {
    using namespace unet_detail;
    cfg.validate();
    UNetEdges<T> edges;
    edges.input = g.add_input("input");

    std::vector<int> skips;
    int cur = edges.input;
    int64_t cur_ch = cfg.in_channels;
    for (int64_t i = 0; i < cfg.levels; ++i) {
        const int64_t ch = cfg.channels_at(i);
        const std::string stage = "enc" + std::to_string(i);
        cur = conv_bn_relu(g, cur, cur_ch, ch, stage + "_conv1", rng);
        cur = conv_bn_relu(g, cur, ch, ch, stage + "_conv2", rng);
        skips.push_back(cur);
        cur = g.add(std::make_unique<MaxPool2<T>>(), {cur}, stage);
        cur_ch = ch;
    }

    const int64_t bott_ch = cfg.channels_at(cfg.levels);
    cur = conv_bn_relu(g, cur, cur_ch, bott_ch, "bottleneck_conv1", rng);
    cur = conv_bn_relu(g, cur, bott_ch, bott_ch, "bottleneck_conv2", rng, "bottleneck");
    edges.bottleneck = cur;
    cur_ch = bott_ch;

    for (int64_t i = cfg.levels - 1; i >= 0; --i) {
        const int64_t ch = cfg.channels_at(i);
        const std::string stage = "dec" + std::to_string(i);
        cur = g.add(std::make_unique<Upsample2<T>>(), {cur}, stage + "_up");
        cur = conv_relu(g, cur, cur_ch, ch, stage + "_upconv", rng);
        cur = g.add(std::make_unique<ConcatChannels<T>>(), {cur, skips[static_cast<size_t>(i)]},
                    stage + "_concat");
        cur = conv_relu(g, cur, 2 * ch, ch, stage + "_conv1", rng);
        cur = conv_relu(g, cur, ch, ch, stage, rng);
        cur_ch = ch;
    }

    {
        auto conv = std::make_unique<Conv1x1<T>>(cur_ch, cfg.seg_classes, "seg_head");
        init_conv_weights(conv->params()[0]->value, cur_ch, rng);
        int e = g.add(std::move(conv), {cur}, "seg_logits");
        edges.seg_probs = g.add(std::make_unique<ChannelSoftmax<T>>(), {e}, "seg_probs");
    }
    {
        auto conv = std::make_unique<Conv1x1<T>>(cur_ch, 1, "voxel_head");
        // start near the middle of the age range: small weights, bias that
        // lands at 0.5 * age_output_scale years after scaling
        init_conv_weights(conv->params()[0]->value, cur_ch, rng);
        for (auto& w : conv->params()[0]->value.v) w *= T(0.1);
        conv->params()[1]->value.v[0] = T(0.5);
        int e = g.add(std::move(conv), {cur}, "voxel_head_raw");
        e = g.add(std::make_unique<FixedScale<T>>(static_cast<T>(cfg.age_output_scale)), {e},
                  "voxel_head_scaled");
        edges.voxel_age = g.add(std::make_unique<ReLU<T>>(), {e}, "voxel_age");
    }
    {
        int e = g.add(std::make_unique<GlobalAvgPool<T>>(), {edges.bottleneck}, "global_pool");
        auto conv = std::make_unique<Conv1x1<T>>(bott_ch, 1, "global_head");
        init_conv_weights(conv->params()[0]->value, bott_ch, rng);
        for (auto& w : conv->params()[0]->value.v) w *= T(0.1);
        conv->params()[1]->value.v[0] = T(0.5);
        e = g.add(std::move(conv), {e}, "global_head_raw");
        edges.global_age = g.add(
            std::make_unique<FixedScale<T>>(static_cast<T>(cfg.age_output_scale)), {e}, "global_age");
    }
    return edges;
}

// Closed-form parameter count for the architecture above; kept next to the
// builder so the two stay in sync.
inline int64_t unet_param_count(const UNetConfig& cfg) {
    auto conv3 = [](int64_t ci, int64_t co) { return co * ci * 27 + co; };
    auto conv1 = [](int64_t ci, int64_t co) { return co * ci + co; };
    auto bn = [](int64_t c) { return 2 * c; };
    int64_t n = 0;
    int64_t cur = cfg.in_channels;
    for (int64_t i = 0; i < cfg.levels; ++i) {
        const int64_t ch = cfg.channels_at(i);
        n += conv3(cur, ch) + bn(ch) + conv3(ch, ch) + bn(ch);
        cur = ch;
    }
    const int64_t bott = cfg.channels_at(cfg.levels);
    n += conv3(cur, bott) + bn(bott) + conv3(bott, bott) + bn(bott);
    cur = bott;
    for (int64_t i = cfg.levels - 1; i >= 0; --i) {
        const int64_t ch = cfg.channels_at(i);
        n += conv3(cur, ch) + conv3(2 * ch, ch) + conv3(ch, ch);
        cur = ch;
    }
    n += conv1(cur, cfg.seg_classes) + conv1(cur, 1) + conv1(bott, 1);
    return n;
}

}  // namespace voxelage::nn
