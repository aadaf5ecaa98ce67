// SPDX-License-Identifier: MIT
#pragma once

#include <map>
#include <string>
#include <vector>

#include "voxelage/nn/graph.hpp"
#include "voxelage/nn/sfcn.hpp"
#include "voxelage/nn/unet.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

// A differentiable scalar to explain or differentiate against: the global-age
// output, or the mean voxel-age over a region of interest.
struct ScalarTarget {
    enum class Kind { GlobalAge, VoxelAgeRoi };
    Kind kind = Kind::GlobalAge;
    MaskVolume roi;  // used by VoxelAgeRoi

    static ScalarTarget global_age() { return {}; }
    static ScalarTarget voxel_age_over(MaskVolume mask) {
        ScalarTarget t;
        t.kind = Kind::VoxelAgeRoi;
        t.roi = std::move(mask);
        return t;
    }

    std::string descriptor() const {
        return kind == Kind::GlobalAge ? "global_age" : "mean voxel_age over ROI";
    }
};

template <class T>
struct MultiTaskBatch {
    Tensor<T> seg_probs;        // (N, classes, D, H, W)
    Tensor<T> voxel_age;        // (N, 1, D, H, W)
    std::vector<T> global_age;  // N scalars, years
};

template <class T>
Tensor<T> volume_to_input(const Volume3D& vol) {
    Tensor<T> t({1, 1, vol.shape[0], vol.shape[1], vol.shape[2]});
    for (int64_t i = 0; i < vol.numel(); ++i) t.v[static_cast<size_t>(i)] = static_cast<T>(vol.data[i]);
    return t;
}

template <class T>
Volume3D tensor_to_volume(const Tensor<T>& t, const Affine& affine, int64_t n, int64_t c) {
    require(t.rank() == 5, "tensor_to_volume: expected 5D tensor");
    Volume3D vol({t.shape[2], t.shape[3], t.shape[4]});
    vol.affine = affine;
    const int64_t S = t.shape[2] * t.shape[3] * t.shape[4];
    const T* src = t.data() + (n * t.shape[1] + c) * S;
    for (int64_t i = 0; i < S; ++i) vol.data[i] = static_cast<float>(src[i]);
    return vol;
}

namespace model_detail {

template <class T>
Tensor<T> roi_seed(const Tensor<T>& voxel_age_value, const MaskVolume& roi) {
    require(voxel_age_value.shape[0] == 1, "ROI target expects a single-sample batch");
    require(voxel_age_value.shape[2] == roi.shape[0] && voxel_age_value.shape[3] == roi.shape[1] &&
                voxel_age_value.shape[4] == roi.shape[2],
            "ROI shape does not match model output");
    int64_t count = 0;
    for (auto m : roi.data) count += m != 0;
    require(count > 0, "ROI is empty");
    Tensor<T> seed(voxel_age_value.shape);
    const T w = T(1) / static_cast<T>(count);
    for (int64_t i = 0; i < roi.numel(); ++i)
        if (roi.data[i]) seed.v[static_cast<size_t>(i)] = w;
    return seed;
}

}  // namespace model_detail

// Multi-output U-Net model (voxel-level paradigm).
template <class T>
class VoxelModel {
public:
    VoxelModel(const nn::UNetConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
        Rng rng(derive_seed(seed, 0x756e6574ull));
        edges_ = nn::build_unet_graph(graph_, cfg, rng);
    }

    const nn::UNetConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    nn::Graph<T>& graph() { return graph_; }
    const nn::Graph<T>& graph() const { return graph_; }

    MultiTaskBatch<T> forward(const Tensor<T>& batch, bool training) {
        graph_.forward(edges_.input, batch, training);
        MultiTaskBatch<T> out;
        out.seg_probs = graph_.value(edges_.seg_probs);
        out.voxel_age = graph_.value(edges_.voxel_age);
        const auto& g = graph_.value(edges_.global_age);
        out.global_age.assign(g.v.begin(), g.v.end());
        return out;
    }

    // losses seed gradients straight into the three head edges
    void backward_heads(const Tensor<T>* seg_seed, const Tensor<T>* voxel_seed,
                        const Tensor<T>* global_seed, bool need_input_grad = false) {
        std::vector<std::pair<int, const Tensor<T>*>> seeds;
        if (seg_seed) seeds.push_back({edges_.seg_probs, seg_seed});
        if (voxel_seed) seeds.push_back({edges_.voxel_age, voxel_seed});
        if (global_seed) seeds.push_back({edges_.global_age, global_seed});
        graph_.backward(seeds, need_input_grad);
    }

    T eval_scalar(const Tensor<T>& input, const ScalarTarget& target) {
        const auto out = forward(input, false);
        if (target.kind == ScalarTarget::Kind::GlobalAge) return out.global_age.at(0);
        const auto seed = model_detail::roi_seed(out.voxel_age, target.roi);
        T acc = 0;
        for (size_t i = 0; i < seed.v.size(); ++i) acc += seed.v[i] * out.voxel_age.v[i];
        return acc;
    }

    Tensor<T> input_gradient(const Tensor<T>& input, const ScalarTarget& target) {
        forward(input, false);
        backward_target(target);
        return graph_.gradient(edges_.input);
    }

    // Runs an eval forward and returns the requested stage activations.
    std::map<std::string, Tensor<T>> capture_activations(const Tensor<T>& input,
                                                         const std::vector<std::string>& layers) {
        forward(input, false);
        std::map<std::string, Tensor<T>> out;
        for (const auto& name : layers) out[name] = graph_.value(graph_.edge_id(name));
        return out;
    }

    // Activation/gradient pairs for a scalar target, one forward-backward.
    std::pair<std::map<std::string, Tensor<T>>, std::map<std::string, Tensor<T>>>
    capture_with_gradients(const Tensor<T>& input, const ScalarTarget& target,
                           const std::vector<std::string>& layers) {
        forward(input, false);
        backward_target(target);
        std::map<std::string, Tensor<T>> acts, grads;
        for (const auto& name : layers) {
            const int e = graph_.edge_id(name);
            acts[name] = graph_.value(e);
            grads[name] = graph_.gradient(e);
        }
        return {acts, grads};
    }

    std::string kind() const { return "voxel"; }

private:
    void backward_target(const ScalarTarget& target) {
        if (target.kind == ScalarTarget::Kind::GlobalAge) {
            Tensor<T> seed(graph_.value(edges_.global_age).shape, T(1));
            graph_.backward({{edges_.global_age, &seed}}, true);
        } else {
            const auto seed = model_detail::roi_seed(graph_.value(edges_.voxel_age), target.roi);
            graph_.backward({{edges_.voxel_age, &seed}}, true);
        }
    }

    nn::UNetConfig cfg_;
    uint64_t seed_;
    nn::Graph<T> graph_;
    nn::UNetEdges<T> edges_;
};

// SFCN-style global-age regressor.
template <class T>
class GlobalModel {
public:
    GlobalModel(const nn::SFCNConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
        Rng rng(derive_seed(seed, 0x7366636eull));
        edges_ = nn::build_sfcn_graph(graph_, cfg, rng);
    }

    const nn::SFCNConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    nn::Graph<T>& graph() { return graph_; }
    const nn::Graph<T>& graph() const { return graph_; }

    std::vector<T> forward(const Tensor<T>& batch, bool training) {
        graph_.forward(edges_.input, batch, training);
        const auto& g = graph_.value(edges_.global_age);
        return std::vector<T>(g.v.begin(), g.v.end());
    }

    void backward_global(const Tensor<T>& seed) { graph_.backward({{edges_.global_age, &seed}}); }

    T eval_scalar(const Tensor<T>& input, const ScalarTarget& target) {
        require(target.kind == ScalarTarget::Kind::GlobalAge,
                "global model only exposes the global_age target");
        return forward(input, false).at(0);
    }

    Tensor<T> input_gradient(const Tensor<T>& input, const ScalarTarget& target) {
        require(target.kind == ScalarTarget::Kind::GlobalAge,
                "global model only exposes the global_age target");
        forward(input, false);
        Tensor<T> seed(graph_.value(edges_.global_age).shape, T(1));
        graph_.backward({{edges_.global_age, &seed}}, true);
        return graph_.gradient(edges_.input);
    }

    std::map<std::string, Tensor<T>> capture_activations(const Tensor<T>& input,
                                                         const std::vector<std::string>& layers) {
        forward(input, false);
        std::map<std::string, Tensor<T>> out;
        for (const auto& name : layers) out[name] = graph_.value(graph_.edge_id(name));
        return out;
    }

    std::pair<std::map<std::string, Tensor<T>>, std::map<std::string, Tensor<T>>>
    capture_with_gradients(const Tensor<T>& input, const ScalarTarget& target,
                           const std::vector<std::string>& layers) {
        require(target.kind == ScalarTarget::Kind::GlobalAge,
                "global model only exposes the global_age target");
        forward(input, false);
        Tensor<T> seed(graph_.value(edges_.global_age).shape, T(1));
        graph_.backward({{edges_.global_age, &seed}}, true);
        std::map<std::string, Tensor<T>> acts, grads;
        for (const auto& name : layers) {
            const int e = graph_.edge_id(name);
            acts[name] = graph_.value(e);
            grads[name] = graph_.gradient(e);
        }
        return {acts, grads};
    }

    std::string kind() const { return "global"; }

private:
    nn::SFCNConfig cfg_;
    uint64_t seed_;
    nn::Graph<T> graph_;
    nn::SFCNEdges<T> edges_;
};

template <class T>
VoxelModel<T> build_voxel_model(const nn::UNetConfig& cfg, uint64_t seed) {
    return VoxelModel<T>(cfg, seed);
}

template <class T>
GlobalModel<T> build_global_model(const nn::SFCNConfig& cfg, uint64_t seed) {
    return GlobalModel<T>(cfg, seed);
}

}  // namespace voxelage
