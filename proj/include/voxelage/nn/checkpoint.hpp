// SPDX-License-Identifier: MIT
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "voxelage/config.hpp"
#include "voxelage/models.hpp"

namespace voxelage {

// Checkpoint = <base>.bin (parameter blob) + <base>.json (manifest). The
// manifest is the stable cross-version contract; the blob carries a format
// version of its own.

namespace checkpoint_detail {

inline constexpr char kBlobMagic[8] = {'V', 'A', 'X', 'B', 'L', 'O', 'B', '1'};

template <class T>
void write_tensor(std::ofstream& out, const std::string& name, const Tensor<T>& t) {
    const uint32_t name_len = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(name.data(), name_len);
    const uint32_t ndims = static_cast<uint32_t>(t.shape.size());
    out.write(reinterpret_cast<const char*>(&ndims), 4);
    for (int64_t d : t.shape) out.write(reinterpret_cast<const char*>(&d), 8);
    const uint8_t dtype = sizeof(T);
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(T)));
}

template <class T>
void read_tensor_into(std::ifstream& in, const std::string& path, std::string& name, Tensor<T>& t) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    if (!in) throw FormatError("truncated checkpoint blob: " + path);
    name.resize(name_len);
    in.read(name.data(), name_len);
    uint32_t ndims = 0;
    in.read(reinterpret_cast<char*>(&ndims), 4);
    std::vector<int64_t> shape(ndims);
    for (auto& d : shape) in.read(reinterpret_cast<char*>(&d), 8);
    uint8_t dtype = 0;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    if (dtype != sizeof(T))
        throw FormatError("checkpoint scalar width mismatch in " + path + " for " + name);
    t.resize(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.v.size() * sizeof(T)));
    if (!in) throw FormatError("truncated checkpoint blob: " + path);
}

}  // namespace checkpoint_detail

template <class T>
void save_model_blob(nn::Graph<T>& graph, const std::string& path) {
    using namespace checkpoint_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint blob: " + path);
    out.write(kBlobMagic, 8);
    const auto params = graph.params();
    const auto state = graph.state();
    const uint32_t count = static_cast<uint32_t>(params.size() + state.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (auto* p : params) write_tensor(out, p->name, p->value);
    for (auto* s : state) write_tensor(out, s->name, s->value);
    if (!out.good()) throw IoError("checkpoint write failure: " + path);
}

template <class T>
void load_model_blob(nn::Graph<T>& graph, const std::string& path) {
    using namespace checkpoint_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint blob: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kBlobMagic, 8) != 0)
        throw FormatError("not a checkpoint blob: " + path);
    uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 4);

    auto params = graph.params();
    auto state = graph.state();
    std::vector<bool> filled(params.size() + state.size(), false);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name;
        Tensor<T> t;
        read_tensor_into(in, path, name, t);
        bool matched = false;
        for (size_t k = 0; k < params.size(); ++k)
            if (params[k]->name == name) {
                check_same_shape(params[k]->value, t, "checkpoint param");
                params[k]->value = std::move(t);
                filled[k] = true;
                matched = true;
                break;
            }
        if (!matched)
            for (size_t k = 0; k < state.size(); ++k)
                if (state[k]->name == name) {
                    check_same_shape(state[k]->value, t, "checkpoint state");
                    state[k]->value = std::move(t);
                    filled[params.size() + k] = true;
                    matched = true;
                    break;
                }
        if (!matched) throw FormatError("checkpoint tensor does not match model: " + name);
    }
    for (bool f : filled)
        if (!f) throw FormatError("checkpoint is missing model tensors: " + path);
}

struct CheckpointMeta {
    int64_t epoch = 0;
    uint64_t rng_seed = 0;
    Json loss_history = Json::array();
};

template <class T>
void save_checkpoint(VoxelModel<T>& model, const std::string& base, const CheckpointMeta& meta) {
    save_model_blob(model.graph(), base + ".bin");
    Json manifest{{"kind", "voxel"},
                  {"config", to_json(model.config())},
                  {"epoch", meta.epoch},
                  {"rng_seed", meta.rng_seed},
                  {"loss_history", meta.loss_history},
                  {"format_version", checkpoint_format_version}};
    std::ofstream out(base + ".json");
    if (!out) throw IoError("cannot write checkpoint manifest: " + base + ".json");
    out << manifest.dump(2) << "\n";
}

template <class T>
void save_checkpoint(GlobalModel<T>& model, const std::string& base, const CheckpointMeta& meta) {
    save_model_blob(model.graph(), base + ".bin");
    Json manifest{{"kind", "global"},
                  {"config", to_json(model.config())},
                  {"epoch", meta.epoch},
                  {"rng_seed", meta.rng_seed},
                  {"loss_history", meta.loss_history},
                  {"format_version", checkpoint_format_version}};
    std::ofstream out(base + ".json");
    if (!out) throw IoError("cannot write checkpoint manifest: " + base + ".json");
    out << manifest.dump(2) << "\n";
}

inline Json load_checkpoint_manifest(const std::string& base) {
    return load_json_file(base + ".json");
}

template <class T>
VoxelModel<T> load_voxel_checkpoint(const std::string& base) {
    const Json manifest = load_checkpoint_manifest(base);
    if (manifest.value("kind", "") != "voxel")
        throw FormatError("checkpoint is not a voxel model: " + base);
    VoxelModel<T> model(unet_config_from_json(manifest.at("config")),
                        manifest.value("rng_seed", uint64_t(0)));
    load_model_blob(model.graph(), base + ".bin");
    return model;
}

template <class T>
GlobalModel<T> load_global_checkpoint(const std::string& base) {
    const Json manifest = load_checkpoint_manifest(base);
    if (manifest.value("kind", "") != "global")
        throw FormatError("checkpoint is not a global model: " + base);
    GlobalModel<T> model(sfcn_config_from_json(manifest.at("config")),
                         manifest.value("rng_seed", uint64_t(0)));
    load_model_blob(model.graph(), base + ".bin");
    return model;
}

}  // namespace voxelage
