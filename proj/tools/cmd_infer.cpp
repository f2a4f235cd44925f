#include <cmath>
#include <iostream>
#include <memory>

#include "canopyuq/ensemble.hpp"
#include "canopyuq/raster_io.hpp"
#include "canopyuq/trainer.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct InferArgs {
    std::vector<std::string> checkpoints;
    std::string covariates_manifest;
    std::string stats;
    std::string out_height;
    std::string out_uncertainty;
    int window = 64;
    int stride = 48;
};

void run_infer(const InferArgs& args) {
    const auto entries = read_manifest(args.covariates_manifest);
    std::vector<std::string> paths;
    for (const auto& e : entries) paths.push_back(e.path);
    RasterGrid covariates = stack_covariates(paths);
    if (!args.stats.empty()) {
        const OnlineStats stats = load_stats(args.stats);
        covariates = clamp_normalize(covariates, stats);
    }

    std::vector<ResUNetF> models;
    models.reserve(args.checkpoints.size());
    for (const std::string& path : args.checkpoints)
        models.push_back(ResUNetF::load(path));
    std::vector<ResUNetF*> model_ptrs;
    for (auto& m : models) model_ptrs.push_back(&m);

    const EnsembleMaps maps = predict_map(model_ptrs, covariates, args.window, args.stride);
    write_raster(maps.mean, args.out_height);

    // Uncertainty export: standard deviations in meters (total, aleatoric,
    // epistemic), one band each.
    RasterGrid unc = RasterGrid::make(maps.total.width, maps.total.height, 3,
                                      maps.total.origin_x, maps.total.origin_y,
                                      maps.total.pixel_size, maps.total.nodata);
    unc.crs_tag = maps.total.crs_tag;
    for (size_t p = 0; p < unc.pixel_count(); ++p) {
        const float total = maps.total.data[p];
        if (maps.total.is_nodata(total)) {
            unc.data[p * 3] = unc.data[p * 3 + 1] = unc.data[p * 3 + 2] = unc.nodata;
            continue;
        }
        unc.data[p * 3] = std::sqrt(total);
        unc.data[p * 3 + 1] = std::sqrt(maps.aleatoric.data[p]);
        unc.data[p * 3 + 2] = std::sqrt(maps.epistemic.data[p]);
    }
    write_raster(unc, args.out_uncertainty);
    std::cout << "infer: " << models.size() << "-member ensemble -> " << args.out_height
              << ", " << args.out_uncertainty << "\n";
}

}  // namespace

void register_infer(CLI::App& app) {
    auto args = std::make_shared<InferArgs>();
    CLI::App* cmd = app.add_subcommand(
        "infer", "Tiled ensemble inference: height map plus uncertainty bands");
    cmd->add_option("--checkpoints", args->checkpoints, "Model checkpoints (CUQM)")
        ->required();
    cmd->add_option("--covariates", args->covariates_manifest, "Covariate manifest")
        ->required();
    cmd->add_option("--stats", args->stats,
                    "Normalization stats CSV from build-dataset (raw covariates)");
    cmd->add_option("--out-height", args->out_height, "Output height raster")->required();
    cmd->add_option("--out-uncertainty", args->out_uncertainty,
                    "Output raster: std bands (total, aleatoric, epistemic), meters")
        ->required();
    cmd->add_option("--window", args->window, "Inference window, pixels");
    cmd->add_option("--stride", args->stride, "Window stride, pixels");
    cmd->callback([args] { run_infer(*args); });
}

}  // namespace canopyuq::cli
