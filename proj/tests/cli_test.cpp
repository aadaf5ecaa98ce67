// SPDX-License-Identifier: MIT
//
// End-to-end exercises of the command-line tool (spawned as a subprocess).
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "voxelage/config.hpp"
#include "voxelage/nifti.hpp"

using namespace voxelage;

namespace {

struct RunResult {
    int exit_code;
    std::string out, err;
};

RunResult run_cli(const std::string& args, const TempDir& dir) {
    const std::string out_path = dir.str("stdout.txt"), err_path = dir.str("stderr.txt");
    const std::string cmd =
        std::string(VOXELAGE_CLI_PATH) + " " + args + " > " + out_path + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream fo(out_path), fe(err_path);
    std::stringstream so, se;
    so << fo.rdbuf();
    se << fe.rdbuf();
    r.out = so.str();
    r.err = se.str();
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

void write_tiny_train_config(const std::string& path, const std::string& kind) {
    Json j;
    if (kind == "voxel")
        j = Json{{"model_kind", "voxel"},
                 {"epochs", 2},
                 {"batch_size", 4},
                 {"patch_size", 16},
                 {"seed", 3},
                 {"model", Json{{"levels", 3}, {"base_channels", 8}}}};
    else
        j = Json{{"model_kind", "global"},
                 {"epochs", 2},
                 {"batch_size", 4},
                 {"patch_size", 32},
                 {"seed", 3},
                 {"model", Json{{"channels", Json::array({4, 8, 8})}}}};
    std::ofstream f(path);
    f << j.dump(2);
}

}  // namespace

TEST(Cli, PhantomGenWritesCohortAndManifest) {
    TempDir dir("cli_gen");
    const auto r = run_cli("phantom-gen --n 8 --size 32 --seed 7 --out " + dir.str("d"), dir);
    EXPECT_EQ(r.exit_code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("d/manifest.csv")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("d/run_manifest.json")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("d/resolved_config.json")));
    int images = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.str("d")))
        if (e.path().string().find("_image.nii.gz") != std::string::npos) ++images;
    EXPECT_EQ(images, 8);
    const Volume3D img = read_nifti(dir.str("d/sub-000_image.nii.gz"));
    EXPECT_EQ(img.shape, (std::array<int64_t, 3>{32, 32, 32}));
}

TEST(Cli, PhantomGenIdempotentModuloTimestamp) {
    TempDir dir("cli_idem");
    ASSERT_EQ(run_cli("phantom-gen --n 3 --size 16 --seed 9 --out " + dir.str("a"), dir).exit_code, 0);
    ASSERT_EQ(run_cli("phantom-gen --n 3 --size 16 --seed 9 --out " + dir.str("b"), dir).exit_code, 0);
    EXPECT_EQ(slurp(dir.str("a/manifest.csv")), slurp(dir.str("b/manifest.csv")));
    EXPECT_EQ(slurp(dir.str("a/sub-001_image.nii.gz")), slurp(dir.str("b/sub-001_image.nii.gz")));
    EXPECT_EQ(slurp(dir.str("a/resolved_config.json")), slurp(dir.str("b/resolved_config.json")));
    Json ma = load_json_file(dir.str("a/run_manifest.json"));
    Json mb = load_json_file(dir.str("b/run_manifest.json"));
    ma.erase("created_utc");
    mb.erase("created_utc");
    EXPECT_EQ(ma, mb);
}

TEST(Cli, TrainPredictInterpretEvalExportPipeline) {
    TempDir dir("cli_pipe");
    ASSERT_EQ(run_cli("phantom-gen --n 6 --size 16 --seed 5 --out " + dir.str("data"), dir).exit_code,
              0);
    write_tiny_train_config(dir.str("cfg.json"), "voxel");

    // train with an override
    const auto train = run_cli("train --config " + dir.str("cfg.json") +
                                   " --override epochs=2 --data " + dir.str("data") + " --out " +
                                   dir.str("run"),
                               dir);
    EXPECT_EQ(train.exit_code, 0) << train.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("run/ckpt_final.bin")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("run/ckpt_final.json")));
    {
        std::ifstream log(dir.str("run/train_log.csv"));
        std::string line;
        int rows = 0;
        while (std::getline(log, line))
            if (!line.empty()) ++rows;
        EXPECT_EQ(rows, 3);  // header + 2 epochs
    }

    // predict on one cohort image
    const auto predict = run_cli("predict --model " + dir.str("run/ckpt_final") + " --input " +
                                     dir.str("data/sub-000_image.nii.gz") + " --out " +
                                     dir.str("pred"),
                                 dir);
    EXPECT_EQ(predict.exit_code, 0) << predict.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("pred/sub-000_image_voxelage.nii.gz")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("pred/sub-000_image_seg.nii.gz")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("pred/sub-000_image_prediction.json")));

    // interpret: occlusion on the trained checkpoint
    const auto interp = run_cli(
        "interpret --method occlusion --model " + dir.str("run/ckpt_final") + " --input " +
            dir.str("data/sub-000_image.nii.gz") + " --target global_age --patch 8 --stride 8 --out " +
            dir.str("saliency"),
        dir);
    EXPECT_EQ(interp.exit_code, 0) << interp.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("saliency/sub-000_image_occlusion.nii.gz")));
    const Json sidecar = load_json_file(dir.str("saliency/sub-000_image_occlusion.json"));
    EXPECT_EQ(sidecar.at("method"), "occlusion");
    EXPECT_EQ(sidecar.at("target_descriptor"), "global_age");

    // smoothgrad too
    const auto sg = run_cli("interpret --method smoothgrad --model " + dir.str("run/ckpt_final") +
                                " --input " + dir.str("data/sub-000_image.nii.gz") +
                                " --n-samples 4 --sigma 0.1 --out " + dir.str("saliency"),
                            dir);
    EXPECT_EQ(sg.exit_code, 0) << sg.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("saliency/sub-000_image_smoothgrad.nii.gz")));

    // gradcam_avg requires two distinct layers
    const auto gc = run_cli("interpret --method gradcam_avg --model " + dir.str("run/ckpt_final") +
                                " --input " + dir.str("data/sub-000_image.nii.gz") +
                                " --layer-early enc0_conv2 --layer-final bottleneck --out " +
                                dir.str("saliency"),
                            dir);
    EXPECT_EQ(gc.exit_code, 0) << gc.err;

    // eval produces metrics.csv and PAD masks
    const auto ev = run_cli("eval --model " + dir.str("run/ckpt_final") + " --data " +
                                dir.str("data") + " --out " + dir.str("evalout"),
                            dir);
    EXPECT_EQ(ev.exit_code, 0) << ev.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("evalout/metrics.csv")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("evalout/sub-000_pad.nii.gz")));
    EXPECT_NE(ev.out.find("subject_id,global_mae,voxel_mae"), std::string::npos);

    // export renders the figure panel
    const auto ex = run_cli("export --input " + dir.str("data/sub-000_image.nii.gz") + " --pad " +
                                dir.str("evalout/sub-000_pad.nii.gz") + " --occlusion " +
                                dir.str("saliency/sub-000_image_occlusion.nii.gz") +
                                " --smoothgrad " + dir.str("saliency/sub-000_image_smoothgrad.nii.gz") +
                                " --axis 0 --index 8 --out " + dir.str("figs"),
                            dir);
    EXPECT_EQ(ex.exit_code, 0) << ex.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("figs/sub-000_image_panel_08.png")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("figs/sub-000_image_pad_08.png")));
    EXPECT_TRUE(std::filesystem::exists(dir.str("figs/sub-000_image_input_08.png")));
}

TEST(Cli, TrainDeterministicAcrossRuns) {
    TempDir dir("cli_det");
    ASSERT_EQ(run_cli("phantom-gen --n 5 --size 16 --seed 11 --out " + dir.str("data"), dir).exit_code,
              0);
    write_tiny_train_config(dir.str("cfg.json"), "voxel");
    ASSERT_EQ(run_cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("data") +
                          " --out " + dir.str("r1"),
                      dir)
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("data") +
                          " --out " + dir.str("r2"),
                      dir)
                  .exit_code,
              0);
    EXPECT_EQ(slurp(dir.str("r1/train_log.csv")), slurp(dir.str("r2/train_log.csv")));
    EXPECT_EQ(slurp(dir.str("r1/ckpt_final.bin")), slurp(dir.str("r2/ckpt_final.bin")));
}

TEST(Cli, TrainGlobalModel) {
    TempDir dir("cli_glob");
    ASSERT_EQ(run_cli("phantom-gen --n 5 --size 32 --seed 13 --out " + dir.str("data"), dir).exit_code,
              0);
    write_tiny_train_config(dir.str("cfg.json"), "global");
    const auto r = run_cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("data") +
                               " --out " + dir.str("run"),
                           dir);
    EXPECT_EQ(r.exit_code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(dir.str("run/ckpt_final.bin")));
    const Json manifest = load_json_file(dir.str("run/ckpt_final.json"));
    EXPECT_EQ(manifest.at("kind"), "global");
}

TEST(Cli, UnknownSubcommandExitsOneWithUsage) {
    TempDir dir("cli_bad");
    const auto r = run_cli("frobnicate", dir);
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_FALSE(r.err.empty());
}

TEST(Cli, MissingInputIsIoError) {
    TempDir dir("cli_io");
    write_tiny_train_config(dir.str("cfg.json"), "voxel");
    const auto r = run_cli("train --config " + dir.str("cfg.json") + " --data " +
                               dir.str("no_such_dir") + " --out " + dir.str("run"),
                           dir);
    EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, BadConfigValueIsValidationError) {
    TempDir dir("cli_valid");
    ASSERT_EQ(run_cli("phantom-gen --n 2 --size 16 --seed 1 --out " + dir.str("data"), dir).exit_code,
              0);
    write_tiny_train_config(dir.str("cfg.json"), "voxel");
    const auto r = run_cli("train --config " + dir.str("cfg.json") +
                               " --override epochs=0 --data " + dir.str("data") + " --out " +
                               dir.str("run"),
                           dir);
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_FALSE(r.err.empty());
}

TEST(Cli, HelpListsFlags) {
    TempDir dir("cli_help");
    const auto top = run_cli("--help", dir);
    EXPECT_EQ(top.exit_code, 0);
    for (const char* sub : {"phantom-gen", "train", "predict", "interpret", "eval", "export"})
        EXPECT_NE(top.out.find(sub), std::string::npos) << sub;

    const auto interp = run_cli("interpret --help", dir);
    EXPECT_EQ(interp.exit_code, 0);
    for (const char* flag : {"--method", "--model", "--input", "--target", "--layer-early",
                             "--layer-final", "--patch", "--stride", "--n-samples", "--sigma",
                             "--out"})
        EXPECT_NE(interp.out.find(flag), std::string::npos) << flag;

    const auto train = run_cli("train --help", dir);
    for (const char* flag : {"--config", "--override", "--data", "--out", "--seed", "--workers"})
        EXPECT_NE(train.out.find(flag), std::string::npos) << flag;
}

TEST(Cli, WorkersEnvVarAccepted) {
    TempDir dir("cli_env");
    ASSERT_EQ(run_cli("phantom-gen --n 4 --size 16 --seed 15 --out " + dir.str("data"), dir).exit_code,
              0);
    write_tiny_train_config(dir.str("cfg.json"), "voxel");
    setenv("VOXELAGE_NUM_WORKERS", "2", 1);
    const auto r = run_cli("train --config " + dir.str("cfg.json") + " --data " + dir.str("data") +
                               " --out " + dir.str("run"),
                           dir);
    unsetenv("VOXELAGE_NUM_WORKERS");
    EXPECT_EQ(r.exit_code, 0) << r.err;
}
