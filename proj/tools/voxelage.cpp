// SPDX-License-Identifier: MIT
//
// voxelage — phantom generation, training, inference, saliency, evaluation,
// and figure export for the voxel-level brain-age pipeline.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "voxelage/voxelage.hpp"

namespace fs = std::filesystem;
using namespace voxelage;

namespace {

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Every run drops a resolved-config JSON and a manifest into out_dir.
void write_run_records(const fs::path& out_dir, const std::string& subcommand, uint64_t seed,
                       const Json& resolved_config) {
    fs::create_directories(out_dir);
    {
        std::ofstream f(out_dir / "resolved_config.json");
        if (!f) throw IoError("cannot write resolved config in " + out_dir.string());
        f << resolved_config.dump(2) << "\n";
    }
    Json manifest{{"subcommand", subcommand},
                  {"seed", seed},
                  {"version", version_string},
                  {"format_version", checkpoint_format_version},
                  {"created_utc", timestamp_utc()}};
    std::ofstream f(out_dir / "run_manifest.json");
    if (!f) throw IoError("cannot write run manifest in " + out_dir.string());
    f << manifest.dump(2) << "\n";
}

std::string stem_of(const std::string& path) {
    std::string name = fs::path(path).filename().string();
    for (const char* ext : {".nii.gz", ".nii"}) {
        const size_t n = std::strlen(ext);
        if (name.size() > n && name.compare(name.size() - n, n, ext) == 0)
            return name.substr(0, name.size() - n);
    }
    return fs::path(name).stem().string();
}

ScalarTarget parse_target(const std::string& target, const std::string& roi_path,
                          const Volume3D& input) {
    if (target == "global_age") return ScalarTarget::global_age();
    if (target == "voxel_age") {
        MaskVolume roi;
        if (!roi_path.empty()) {
            roi = read_nifti(roi_path).cast<uint8_t>();
        } else {
            // default ROI: every voxel of the input grid
            roi = MaskVolume(input.shape, 1);
        }
        return ScalarTarget::voxel_age_over(std::move(roi));
    }
    throw ValidationError("unknown target '" + target + "' (use global_age or voxel_age)");
}

struct InterpretArgs {
    std::string method, model, input, out_dir;
    std::string target = "global_age";
    std::string roi;
    std::string layer_early, layer_final;
    int64_t patch = 0, stride = 0;
    int64_t n_samples = kSmoothGradDefaultSamples;
    double sigma = kSmoothGradDefaultSigma;
    double fill = 0.0;
    uint64_t seed = 0;
};

template <class Model>
SaliencyResult run_interpret_method(Model& model, const InterpretArgs& args, const Volume3D& input,
                                    const ScalarTarget& target, const std::string& default_layer) {
    if (args.method == "gradcam") {
        const std::string layer = args.layer_final.empty() ? default_layer : args.layer_final;
        return grad_cam(model, input, layer, target);
    }
    if (args.method == "gradcam_avg") {
        require(!args.layer_early.empty(), "gradcam_avg requires --layer-early");
        const std::string final_layer = args.layer_final.empty() ? default_layer : args.layer_final;
        return grad_cam_averaged(model, input, args.layer_early, final_layer, target);
    }
    if (args.method == "occlusion") {
        // defaults per input size: patch = extent/4 rounded to even, stride = patch/2
        int64_t patch = args.patch;
        if (patch <= 0) {
            patch = std::min({input.shape[0], input.shape[1], input.shape[2]}) / 4;
            patch -= patch % 2;
            patch = std::max<int64_t>(patch, 2);
        }
        const int64_t stride = args.stride > 0 ? args.stride : std::max<int64_t>(1, patch / 2);
        return occlusion_sensitivity(model, input, patch, stride, static_cast<float>(args.fill),
                                     target);
    }
    if (args.method == "smoothgrad")
        return smoothgrad(model, input, args.n_samples, args.sigma, target, SmoothGradMode::Signed,
                          args.seed);
    throw ValidationError("unknown method '" + args.method + "'");
}

int run(int argc, char** argv) {
    CLI::App app{"voxel-level brain age pipeline"};
    app.require_subcommand(1);

    // phantom-gen
    auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic phantom cohort");
    int64_t gen_n = 8;
    PhantomSpec gen_spec;
    std::string gen_out;
    double offset_years = 0.0;
    int offset_octant = -1;
    gen->add_option("--n", gen_n, "number of subjects");
    gen->add_option("--size", gen_spec.size, "voxels per axis");
    gen->add_option("--seed", gen_spec.seed, "cohort seed");
    gen->add_option("--age-low", gen_spec.age_range[0], "age range low (years)");
    gen->add_option("--age-high", gen_spec.age_range[1], "age range high (years)");
    gen->add_option("--noise-sigma", gen_spec.noise_sigma, "intensity noise sigma");
    gen->add_option("--offset-years", offset_years, "regional age offset (years)");
    gen->add_option("--offset-octant", offset_octant, "octant index 0-7 for the regional offset");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train the voxel or global model");
    std::string train_config, train_data, train_out;
    std::vector<std::string> overrides;
    std::optional<uint64_t> seed_flag;
    std::optional<int64_t> workers_flag;
    train->add_option("--config", train_config, "train config JSON")->required();
    train->add_option("--override", overrides, "key=value override (repeatable)");
    train->add_option("--data", train_data, "cohort directory (phantom-gen output)")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--seed", seed_flag, "seed override");
    train->add_option("--workers", workers_flag, "data-pipeline worker count")
        ->envname("VOXELAGE_NUM_WORKERS");

    // predict
    auto* predict = app.add_subcommand("predict", "whole-volume inference");
    std::string pr_model, pr_input, pr_out;
    int64_t pr_window = 0;
    predict->add_option("--model", pr_model, "checkpoint base path")->required();
    predict->add_option("--input", pr_input, "input NIfTI")->required();
    predict->add_option("--window", pr_window, "sliding window size (0 = whole volume)");
    predict->add_option("--out", pr_out, "output directory")->required();

    // interpret
    auto* interp = app.add_subcommand("interpret", "saliency maps for a trained model");
    InterpretArgs ia;
    interp->add_option("--method", ia.method, "gradcam | gradcam_avg | occlusion | smoothgrad")
        ->required();
    interp->add_option("--model", ia.model, "checkpoint base path")->required();
    interp->add_option("--input", ia.input, "input NIfTI")->required();
    interp->add_option("--target", ia.target, "global_age | voxel_age");
    interp->add_option("--roi", ia.roi, "ROI mask NIfTI for the voxel_age target");
    interp->add_option("--layer-early", ia.layer_early, "early layer for gradcam_avg");
    interp->add_option("--layer-final", ia.layer_final, "target layer (default: final conv stage)");
    interp->add_option("--patch", ia.patch, "occlusion cube size");
    interp->add_option("--stride", ia.stride, "occlusion stride");
    interp->add_option("--fill", ia.fill, "occlusion fill value");
    interp->add_option("--n-samples", ia.n_samples, "smoothgrad sample count");
    interp->add_option("--sigma", ia.sigma, "smoothgrad noise (fraction of dynamic range)");
    interp->add_option("--seed", ia.seed, "smoothgrad noise seed");
    interp->add_option("--out", ia.out_dir, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "cohort metrics in the reporting format");
    std::string ev_model, ev_data, ev_out;
    int64_t ev_window = 0;
    bool ev_pad = true;
    eval->add_option("--model", ev_model, "checkpoint base path")->required();
    eval->add_option("--data", ev_data, "cohort directory with ground truth")->required();
    eval->add_option("--window", ev_window, "sliding window size (0 = whole volume)");
    eval->add_flag("--pad,!--no-pad", ev_pad, "write per-subject PAD masks");
    eval->add_option("--out", ev_out, "output directory")->required();

    // export
    auto* exp = app.add_subcommand("export", "render slices / figure panels to PNG");
    std::string ex_input, ex_pad, ex_gradcam, ex_occlusion, ex_smoothgrad, ex_out;
    int ex_axis = 0;
    int64_t ex_index = -1;
    exp->add_option("--input", ex_input, "input NIfTI (gray panel column)")->required();
    exp->add_option("--pad", ex_pad, "PAD mask NIfTI");
    exp->add_option("--gradcam", ex_gradcam, "Grad-CAM map NIfTI");
    exp->add_option("--occlusion", ex_occlusion, "occlusion map NIfTI");
    exp->add_option("--smoothgrad", ex_smoothgrad, "SmoothGrad map NIfTI");
    exp->add_option("--axis", ex_axis, "slice axis (0,1,2)");
    exp->add_option("--index", ex_index, "slice index (default: middle)");
    exp->add_option("--out", ex_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        if (offset_octant >= 0) {
            require(offset_octant < 8, "--offset-octant must be in 0..7");
            gen_spec.regional_offset = RegionalOffset{offset_octant, offset_years};
        }
        const auto cohort = generate_cohort(gen_spec, gen_n);
        write_cohort(cohort, gen_out);
        Json resolved{{"n", gen_n},
                      {"size", gen_spec.size},
                      {"seed", gen_spec.seed},
                      {"age_range", gen_spec.age_range},
                      {"noise_sigma", gen_spec.noise_sigma}};
        if (gen_spec.regional_offset)
            resolved["regional_offset"] = {{"octant", gen_spec.regional_offset->octant},
                                           {"offset_years", gen_spec.regional_offset->offset_years}};
        write_run_records(gen_out, "phantom-gen", gen_spec.seed, resolved);
        std::cout << "wrote " << cohort.size() << " subjects to " << gen_out << "\n";
        return 0;
    }

    if (train->parsed()) {
        Json j = load_json_file(train_config);
        for (const auto& kv : overrides) apply_override(j, kv);
        TrainConfig cfg = train_config_from_json(j);
        if (seed_flag) cfg.seed = *seed_flag;
        if (workers_flag) cfg.workers = *workers_flag;
        const auto cohort = read_cohort(train_data);
        write_run_records(train_out, "train", cfg.seed, to_json(cfg));
        if (cfg.model_kind == "voxel") {
            auto [model, result] = train_voxel_model(cohort, cfg, train_out);
            std::cout << "trained voxel model: " << result.log.rows.size() << " epochs"
                      << (result.best_epoch >= 0
                              ? ", best val voxel MAE " + std::to_string(result.best_val) +
                                    " at epoch " + std::to_string(result.best_epoch)
                              : std::string())
                      << "\n";
        } else {
            auto [model, result] = train_global_model(cohort, cfg, train_out);
            std::cout << "trained global model: " << result.log.rows.size() << " epochs"
                      << (result.best_epoch >= 0
                              ? ", best val MAE " + std::to_string(result.best_val) + " at epoch " +
                                    std::to_string(result.best_epoch)
                              : std::string())
                      << "\n";
        }
        return 0;
    }

    if (predict->parsed()) {
        const Json manifest = load_checkpoint_manifest(pr_model);
        const Volume3D image = normalize_intensity(reorient_canonical(read_nifti(pr_input)));
        fs::create_directories(pr_out);
        const std::string stem = stem_of(pr_input);
        Json resolved{{"model", pr_model}, {"input", pr_input}, {"window", pr_window}};
        if (manifest.value("kind", "") == "voxel") {
            auto model = load_voxel_checkpoint<float>(pr_model);
            Subject s;
            s.subject_id = stem;
            s.image = image;
            const auto out = predict_voxel(model, s, pr_window);
            write_nifti(out.voxel_age, (fs::path(pr_out) / (stem + "_voxelage.nii.gz")).string());
            write_nifti(seg_argmax(out.seg_probs).cast<float>(),
                        (fs::path(pr_out) / (stem + "_seg.nii.gz")).string());
            Json pred{{"subject", stem}, {"global_age", out.global_age}};
            std::ofstream f(fs::path(pr_out) / (stem + "_prediction.json"));
            f << pred.dump(2) << "\n";
        } else {
            auto model = load_global_checkpoint<float>(pr_model);
            Tensor<float> input = volume_to_input<float>(image);
            const auto pred = model.forward(input, false);
            Json out{{"subject", stem}, {"global_age", pred[0]}};
            std::ofstream f(fs::path(pr_out) / (stem + "_prediction.json"));
            f << out.dump(2) << "\n";
        }
        write_run_records(pr_out, "predict", 0, resolved);
        return 0;
    }

    if (interp->parsed()) {
        const Json manifest = load_checkpoint_manifest(ia.model);
        const Volume3D image = normalize_intensity(reorient_canonical(read_nifti(ia.input)));
        const ScalarTarget target = parse_target(ia.target, ia.roi, image);
        fs::create_directories(ia.out_dir);
        SaliencyResult res;
        if (manifest.value("kind", "") == "voxel") {
            auto model = load_voxel_checkpoint<float>(ia.model);
            res = run_interpret_method(model, ia, image, target, "bottleneck");
        } else {
            require(ia.target == "global_age", "the global model only exposes target global_age");
            auto model = load_global_checkpoint<float>(ia.model);
            const std::string default_layer =
                "block" + std::to_string(model.config().channels.size());
            res = run_interpret_method(model, ia, image, target, default_layer);
        }
        const std::string base =
            (fs::path(ia.out_dir) / (stem_of(ia.input) + "_" + ia.method)).string();
        save_saliency(res, base, fs::path(ia.model).filename().string());
        Json resolved{{"method", ia.method}, {"model", ia.model},   {"input", ia.input},
                      {"target", ia.target}, {"params", res.params}};
        write_run_records(ia.out_dir, "interpret", ia.seed, resolved);
        std::cout << "wrote " << base << ".nii.gz\n";
        return 0;
    }

    if (eval->parsed()) {
        const Json manifest = load_checkpoint_manifest(ev_model);
        auto cohort = read_cohort(ev_data);
        for (auto& s : cohort) s = prepare_subject(s);
        fs::create_directories(ev_out);
        MetricsReport report;
        if (manifest.value("kind", "") == "voxel") {
            auto model = load_voxel_checkpoint<float>(ev_model);
            report = evaluate_cohort(model, cohort, ev_window);
            if (ev_pad)
                for (const auto& s : cohort) {
                    const auto out = predict_voxel(model, s, ev_window);
                    const auto pad =
                        compute_pad(out.voxel_age, s.chronological_age, s.brain_mask, s.subject_id);
                    write_nifti(pad.map,
                                (fs::path(ev_out) / (s.subject_id + "_pad.nii.gz")).string());
                }
        } else {
            auto model = load_global_checkpoint<float>(ev_model);
            report = evaluate_cohort_global(model, cohort);
        }
        report.write_csv((fs::path(ev_out) / "metrics.csv").string());
        Json resolved{{"model", ev_model}, {"data", ev_data}, {"window", ev_window}};
        write_run_records(ev_out, "eval", 0, resolved);
        std::cout << report.to_csv();
        return 0;
    }

    if (exp->parsed()) {
        const Volume3D image = read_nifti(ex_input);
        if (ex_index < 0) ex_index = image.shape[ex_axis] / 2;
        fs::create_directories(ex_out);
        const std::string stem = stem_of(ex_input);
        const std::string suffix =
            "_" + std::to_string(ex_axis) + std::to_string(ex_index) + ".png";

        struct Panel {
            std::string kind, path;
            Colormap map;
        };
        std::vector<Panel> panels = {{"input", ex_input, Colormap::Gray}};
        if (!ex_gradcam.empty()) panels.push_back({"gradcam", ex_gradcam, Colormap::RedYellowBlue});
        if (!ex_occlusion.empty())
            panels.push_back({"occlusion", ex_occlusion, Colormap::DivergingBlueWhiteRed});
        if (!ex_smoothgrad.empty())
            panels.push_back({"smoothgrad", ex_smoothgrad, Colormap::RedYellowBlue});
        if (!ex_pad.empty()) panels.push_back({"pad", ex_pad, Colormap::DivergingBlueWhiteRed});

        for (const auto& p : panels) {
            const Volume3D vol = p.kind == "input" ? image : read_nifti(p.path);
            export_slice(vol, ex_axis, ex_index, p.map, std::nullopt,
                         (fs::path(ex_out) / (stem + "_" + p.kind + suffix)).string());
        }
        // side-by-side panel in the figure layout
        {
            const int r_axis = ex_axis == 0 ? 1 : 0;
            const int c_axis = ex_axis == 2 ? 1 : 2;
            const int64_t height = image.shape[r_axis];
            const int64_t width = image.shape[c_axis];
            std::vector<uint8_t> panel(static_cast<size_t>(height * width * 3 * panels.size()));
            const int64_t panel_width = width * static_cast<int64_t>(panels.size());
            for (size_t pi = 0; pi < panels.size(); ++pi) {
                // render each column through export_slice's pixel path by
                // re-reading the PNG-free route: recompute colours directly
                const Volume3D vol =
                    panels[pi].kind == "input" ? image : read_nifti(panels[pi].path);
                double range = 0;
                float lo = vol.data[0], hi = vol.data[0];
                for (float v : vol.data) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                    range = std::max(range, std::abs(static_cast<double>(v)));
                }
                for (int64_t r = 0; r < height; ++r)
                    for (int64_t c = 0; c < width; ++c) {
                        std::array<int64_t, 3> idx{};
                        idx[static_cast<size_t>(ex_axis)] = ex_index;
                        idx[static_cast<size_t>(r_axis)] = r;
                        idx[static_cast<size_t>(c_axis)] = c;
                        const double v = vol.at(idx[0], idx[1], idx[2]);
                        double t;
                        if (panels[pi].map == Colormap::DivergingBlueWhiteRed)
                            t = range > 0 ? (v / range + 1.0) / 2.0 : 0.5;
                        else
                            t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
                        const auto px = colormap_rgb(panels[pi].map, t);
                        const size_t dst = static_cast<size_t>(
                            (r * panel_width + static_cast<int64_t>(pi) * width + c) * 3);
                        std::copy(px.begin(), px.end(), panel.begin() + dst);
                    }
            }
            write_png_rgb((fs::path(ex_out) / (stem + "_panel" + suffix)).string(), panel_width,
                          height, panel);
        }
        Json resolved{{"input", ex_input}, {"axis", ex_axis}, {"index", ex_index}};
        write_run_records(ex_out, "export", 0, resolved);
        return 0;
    }

    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
