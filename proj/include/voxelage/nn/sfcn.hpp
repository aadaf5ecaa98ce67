// SPDX-License-Identifier: MIT
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "voxelage/nn/graph.hpp"

namespace voxelage::nn {

// SFCN-style global regressor: 3x3x3 conv + BN + ReLU + factor-2 max-pool
// blocks, a 1x1x1 conv + BN + ReLU block, then global average pooling and a
// linear map to one scalar (the regression head that replaces the original
// soft-classification head). With the default six channel entries this gives
// seven convolutional stages.
struct SFCNConfig {
    std::vector<int64_t> channels = {32, 64, 128, 256, 256, 64};
    int64_t in_channels = 1;
    double age_output_scale = 100.0;

    static SFCNConfig desk() { return SFCNConfig{}; }

    void validate() const {
        require(channels.size() >= 2, "sfcn: need at least two channel entries");
        for (int64_t c : channels) require(c >= 1, "sfcn: channels must be positive");
        require(age_output_scale > 0, "sfcn: age_output_scale must be positive");
    }

    int64_t pooled_blocks() const { return static_cast<int64_t>(channels.size()) - 1; }
    // minimum input extent: one voxel must survive all pools
    int64_t min_input_extent() const { return int64_t(1) << pooled_blocks(); }
    int64_t conv_stage_count() const { return static_cast<int64_t>(channels.size()) + 1; }
};

template <class T>
struct SFCNEdges {
    int input = -1;
    int global_age = -1;
};

template <class T>
SFCNEdges<T> build_sfcn_graph(Graph<T>& g, const SFCNConfig& cfg, Rng& rng) {
    cfg.validate();
    SFCNEdges<T> edges;
    edges.input = g.add_input("input");

    int cur = edges.input;
    int64_t cur_ch = cfg.in_channels;
    const size_t k = cfg.channels.size();
    for (size_t i = 0; i < k; ++i) {
        const int64_t ch = cfg.channels[i];
        const std::string name = "block" + std::to_string(i + 1);
        const bool last = i + 1 == k;
        int e;
        if (last) {
            auto conv = std::make_unique<Conv1x1<T>>(cur_ch, ch, name);
            init_conv_weights(conv->params()[0]->value, cur_ch, rng);
            e = g.add(std::move(conv), {cur}, name + "_raw");
        } else {
            auto conv = std::make_unique<Conv3d<T>>(cur_ch, ch, name);
            init_conv_weights(conv->params()[0]->value, cur_ch * 27, rng);
            e = g.add(std::move(conv), {cur}, name + "_raw");
        }
        e = g.add(std::make_unique<BatchNorm3d<T>>(ch, name), {e}, name + "_bn");
        e = g.add(std::make_unique<ReLU<T>>(), {e}, last ? name : name + "_conv");
        cur = last ? e : g.add(std::make_unique<MaxPool2<T>>(), {e}, name);
        cur_ch = ch;
    }

    int e = g.add(std::make_unique<GlobalAvgPool<T>>(), {cur}, "head_pool");
    auto head = std::make_unique<Conv1x1<T>>(cur_ch, 1, "head");
    init_conv_weights(head->params()[0]->value, cur_ch, rng);
    for (auto& w : head->params()[0]->value.v) w *= T(0.1);
    head->params()[1]->value.v[0] = T(0.5);
    e = g.add(std::move(head), {e}, "head_raw");
    edges.global_age =
        g.add(std::make_unique<FixedScale<T>>(static_cast<T>(cfg.age_output_scale)), {e}, "global_age");
    return edges;
}

}  // namespace voxelage::nn
