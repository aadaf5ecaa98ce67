// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <fstream>
#include <string>

#include <json.hpp>

#include "voxelage/common.hpp"
#include "voxelage/nn/sfcn.hpp"
#include "voxelage/nn/unet.hpp"

namespace voxelage {

using Json = nlohmann::json;

// Experiment configuration, one JSON document per run. Paper-scale values
// are the defaults; desk presets swap in sizes that train in minutes.
struct TrainConfig {
    std::string model_kind = "voxel";  // voxel | global
    int64_t epochs = 300;
    double initial_lr = 1e-3;
    int64_t lr_step = 70;
    double lr_factor = 0.5;
    int64_t batch_size = 8;
    int64_t patch_size = 96;
    double augment_probability = 0.5;
    double augment_angle = 15.0;
    std::array<double, 2> label_noise{-2.0, 2.0};
    uint64_t seed = 0;
    double min_brain_fraction = 0.3;
    double validation_fraction = 0.1;
    int64_t checkpoint_interval = 10;
    int64_t workers = 1;
    bool use_mse_global = false;  // ablation switch; MAE is the paper's pick
    nn::UNetConfig unet;
    nn::SFCNConfig sfcn;

    static TrainConfig desk_voxel() {
        TrainConfig c;
        c.model_kind = "voxel";
        c.epochs = 60;
        c.batch_size = 4;
        c.patch_size = 32;
        c.unet = nn::UNetConfig::desk();
        return c;
    }

    static TrainConfig desk_global() {
        TrainConfig c;
        c.model_kind = "global";
        c.epochs = 30;
        c.initial_lr = 1e-4;
        c.lr_step = 20;
        c.batch_size = 4;
        c.patch_size = 32;
        c.sfcn = nn::SFCNConfig::desk();
        return c;
    }

    void validate() const {
        require(model_kind == "voxel" || model_kind == "global",
                "model_kind must be 'voxel' or 'global'");
        require(epochs > 0 && batch_size > 0 && patch_size > 0,
                "epochs, batch_size, patch_size must be positive");
        require(lr_factor > 0 && lr_factor <= 1, "lr_factor must be in (0,1]");
        require(lr_step > 0 && initial_lr > 0, "lr_step and initial_lr must be positive");
        require(augment_probability >= 0 && augment_probability <= 1,
                "augment_probability must be in [0,1]");
        require(label_noise[0] <= label_noise[1], "label_noise must satisfy low <= high");
        require(min_brain_fraction >= 0 && min_brain_fraction < 1,
                "min_brain_fraction must be in [0,1)");
        require(validation_fraction >= 0 && validation_fraction < 1,
                "validation_fraction must be in [0,1)");
        require(workers >= 1, "workers must be >= 1");
        if (model_kind == "voxel") unet.validate();
        else sfcn.validate();
    }
};

namespace config_detail {

inline void reject_unknown_keys(const Json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok) throw ValidationError("unknown config key '" + key + "' in " + where);
    }
}

}  // namespace config_detail

inline Json to_json(const nn::UNetConfig& c) {
    return Json{{"levels", c.levels},
                {"base_channels", c.base_channels},
                {"in_channels", c.in_channels},
                {"seg_classes", c.seg_classes},
                {"age_output_scale", c.age_output_scale}};
}

inline nn::UNetConfig unet_config_from_json(const Json& j) {
    config_detail::reject_unknown_keys(
        j, {"levels", "base_channels", "in_channels", "seg_classes", "age_output_scale"}, "model");
    nn::UNetConfig c;
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.seg_classes = j.value("seg_classes", c.seg_classes);
    c.age_output_scale = j.value("age_output_scale", c.age_output_scale);
    return c;
}

inline Json to_json(const nn::SFCNConfig& c) {
    return Json{{"channels", c.channels},
                {"in_channels", c.in_channels},
                {"age_output_scale", c.age_output_scale}};
}

inline nn::SFCNConfig sfcn_config_from_json(const Json& j) {
    config_detail::reject_unknown_keys(j, {"channels", "in_channels", "age_output_scale"}, "model");
    nn::SFCNConfig c;
    if (j.contains("channels")) c.channels = j["channels"].get<std::vector<int64_t>>();
    c.in_channels = j.value("in_channels", c.in_channels);
    c.age_output_scale = j.value("age_output_scale", c.age_output_scale);
    return c;
}

inline Json to_json(const TrainConfig& c) {
    Json j{{"model_kind", c.model_kind},
           {"epochs", c.epochs},
           {"initial_lr", c.initial_lr},
           {"lr_step", c.lr_step},
           {"lr_factor", c.lr_factor},
           {"batch_size", c.batch_size},
           {"patch_size", c.patch_size},
           {"augment_probability", c.augment_probability},
           {"augment_angle", c.augment_angle},
           {"label_noise", c.label_noise},
           {"seed", c.seed},
           {"min_brain_fraction", c.min_brain_fraction},
           {"validation_fraction", c.validation_fraction},
           {"checkpoint_interval", c.checkpoint_interval},
           {"workers", c.workers},
           {"use_mse_global", c.use_mse_global}};
    j["model"] = c.model_kind == "voxel" ? to_json(c.unet) : to_json(c.sfcn);
    return j;
}

inline TrainConfig train_config_from_json(const Json& j) {
    config_detail::reject_unknown_keys(
        j,
        {"model_kind", "epochs", "initial_lr", "lr_step", "lr_factor", "batch_size", "patch_size",
         "augment_probability", "augment_angle", "label_noise", "seed", "min_brain_fraction",
         "validation_fraction", "checkpoint_interval", "workers", "use_mse_global", "model"},
        "train config");
    TrainConfig c;
    c.model_kind = j.value("model_kind", c.model_kind);
    // model-kind presets before field overrides
    if (c.model_kind == "global") {
        c.epochs = 50;
        c.initial_lr = 1e-4;
        c.lr_step = 20;
    }
    c.epochs = j.value("epochs", c.epochs);
    c.initial_lr = j.value("initial_lr", c.initial_lr);
    c.lr_step = j.value("lr_step", c.lr_step);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.augment_probability = j.value("augment_probability", c.augment_probability);
    c.augment_angle = j.value("augment_angle", c.augment_angle);
    if (j.contains("label_noise")) c.label_noise = j["label_noise"].get<std::array<double, 2>>();
    c.seed = j.value("seed", c.seed);
    c.min_brain_fraction = j.value("min_brain_fraction", c.min_brain_fraction);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.workers = j.value("workers", c.workers);
    c.use_mse_global = j.value("use_mse_global", c.use_mse_global);
    if (j.contains("model")) {
        if (c.model_kind == "voxel") c.unet = unet_config_from_json(j["model"]);
        else c.sfcn = sfcn_config_from_json(j["model"]);
    }
    c.validate();
    return c;
}

inline Json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    Json j;
    try {
        in >> j;
    } catch (const Json::parse_error& e) {
        throw FormatError("config parse error in " + path + ": " + e.what());
    }
    return j;
}

// Applies a "dotted.key=value" override to a JSON document. Values are parsed
// as JSON when possible, else taken as strings.
inline void apply_override(Json& j, const std::string& kv) {
    const size_t eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, "override must look like key=value: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(raw);
    } catch (const Json::parse_error&) {
        value = raw;
    }
    Json* cur = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        require(!part.empty(), "bad override key: " + key);
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            break;
        }
        cur = &(*cur)[part];
        start = dot + 1;
    }
}

}  // namespace voxelage
