// SPDX-License-Identifier: MIT
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "voxelage/nn/layers.hpp"
#include "voxelage/rng.hpp"

namespace voxelage::nn {

// Static computation DAG. Nodes are appended in topological order by the
// model builders; every edge holds its activation and, after backward(), the
// gradient of the seeded scalar with respect to that activation. That is the
// capture substrate the saliency methods build on.
template <class T>
class Graph {
public:
    struct Edge {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        int producer = -1;
    };

    struct Node {
        std::unique_ptr<Layer<T>> layer;
        std::vector<int> inputs;
        int output;
    };

    int add_input(const std::string& name) {
        edges_.push_back(Edge{name, {}, {}, -1});
        input_edges_.push_back(static_cast<int>(edges_.size()) - 1);
        return static_cast<int>(edges_.size()) - 1;
    }

    int add(std::unique_ptr<Layer<T>> layer, std::vector<int> inputs, const std::string& out_name) {
        edges_.push_back(Edge{out_name, {}, {}, static_cast<int>(nodes_.size())});
        const int out = static_cast<int>(edges_.size()) - 1;
        nodes_.push_back(Node{std::move(layer), std::move(inputs), out});
        return out;
    }

    void set_input(int input_edge, const Tensor<T>& input) { edges_[input_edge].value = input; }

    void run(bool training) { run_forward(training); }

    void forward(int input_edge, const Tensor<T>& input, bool training) {
        set_input(input_edge, input);
        run_forward(training);
    }

    // Seeds gradients at the given edges and back-propagates. Parameter
    // gradients accumulate; call Adam::zero_grad (or zero_param_grads) first
    // when a fresh gradient is wanted.
    void backward(const std::vector<std::pair<int, const Tensor<T>*>>& seeds,
                  bool need_input_grad = false) {
        for (auto& e : edges_) {
            e.grad.resize(e.value.shape);
            e.grad.zero();
        }
        for (const auto& [edge, seed] : seeds) {
            require(edge >= 0 && edge < static_cast<int>(edges_.size()), "backward: bad edge");
            check_same_shape(edges_[edge].value, *seed, "backward seed");
            for (size_t i = 0; i < seed->v.size(); ++i) edges_[edge].grad.v[i] += seed->v[i];
        }
        for (int ni = static_cast<int>(nodes_.size()) - 1; ni >= 0; --ni) {
            Node& node = nodes_[ni];
            std::vector<const Tensor<T>*> in;
            std::vector<Tensor<T>*> gin;
            for (int e : node.inputs) {
                in.push_back(&edges_[e].value);
                const bool is_input = edges_[e].producer < 0;
                gin.push_back(is_input && !need_input_grad ? nullptr : &edges_[e].grad);
            }
            node.layer->backward(in, edges_[node.output].value, edges_[node.output].grad, gin,
                                 last_training_);
        }
    }

    int edge_id(const std::string& name) const {
        for (size_t i = 0; i < edges_.size(); ++i)
            if (edges_[i].name == name) return static_cast<int>(i);
        throw LookupError("unknown layer/edge name: " + name);
    }

    bool has_edge(const std::string& name) const {
        for (const auto& e : edges_)
            if (e.name == name) return true;
        return false;
    }

    const Tensor<T>& value(int edge) const { return edges_[edge].value; }
    const Tensor<T>& gradient(int edge) const { return edges_[edge].grad; }

    std::vector<std::string> edge_names() const {
        std::vector<std::string> names;
        for (const auto& e : edges_) names.push_back(e.name);
        return names;
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (auto& n : nodes_)
            for (auto* p : n.layer->params()) out.push_back(p);
        return out;
    }

    std::vector<StateTensor<T>*> state() {
        std::vector<StateTensor<T>*> out;
        for (auto& n : nodes_)
            for (auto* s : n.layer->state()) out.push_back(s);
        return out;
    }

    Param<T>& param(const std::string& name) {
        for (auto* p : params())
            if (p->name == name) return *p;
        throw LookupError("unknown parameter: " + name);
    }

    void zero_param_grads() {
        for (auto* p : params()) p->grad.zero();
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto* p : params()) n += p->value.numel();
        return n;
    }

private:
    void run_forward(bool training) {
        last_training_ = training;
        for (auto& node : nodes_) {
            std::vector<const Tensor<T>*> in;
            for (int e : node.inputs) in.push_back(&edges_[e].value);
            Edge& out = edges_[node.output];
            out.value.resize(node.layer->output_shape(in));
            node.layer->forward(in, out.value, training);
        }
    }

    std::vector<Node> nodes_;
    std::vector<Edge> edges_;
    std::vector<int> input_edges_;
    bool last_training_ = false;
};

// Kaiming-normal initialization for convolution weights, deterministic in the
// generator state.
template <class T>
void init_conv_weights(Tensor<T>& w, int64_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.v) v = static_cast<T>(rng.normal(0.0, stddev));
}

}  // namespace voxelage::nn
