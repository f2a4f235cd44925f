#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <set>

#include "canopyuq/calibrate.hpp"
#include "canopyuq/composite.hpp"
#include "canopyuq/ensemble.hpp"
#include "canopyuq/evaluate.hpp"
#include "canopyuq/harmonize.hpp"
#include "canopyuq/raster_io.hpp"
#include "canopyuq/trainer.hpp"
#include "cli_common.hpp"

namespace fs = std::filesystem;

namespace canopyuq::cli {

namespace {

struct PipelineArgs {
    uint64_t seed = 0;
    int size = 320;
    double outlier_rate = 0.05;
    int tile_rows = 4;
    int tile_cols = 4;
    int folds = 2;
    int members = 5;  // sub-folds per fold, one model each
    int epochs = 12;
    int batch = 8;
    double lr0 = 1e-3;
    int base_filters = 8;
    int depth = 3;
    bool unweighted = false;
    std::string config;
    std::string out;
};

// Rebuild each 3-channel season group from fabricated noisy, partially masked
// acquisitions, exercising the compositor inside the chain.
RasterGrid composited_covariates(const RasterGrid& covariates, uint64_t seed) {
    const int groups = covariates.channels / 3;
    RasterGrid out = covariates;
    Rng rng(seed ^ 0xC0317EULL);
    for (int g = 0; g < groups; ++g) {
        std::vector<Observation> obs;
        const auto add_copies = [&](int year, int copies, double mask_rate) {
            for (int i = 0; i < copies; ++i) {
                Observation o;
                o.image = RasterGrid::make(covariates.width, covariates.height, 3,
                                           covariates.origin_x, covariates.origin_y,
                                           covariates.pixel_size, covariates.nodata);
                o.year = year;
                o.season = static_cast<Season>(g % 3);
                o.sensor = Sensor::sar;  // nodata-only validity
                for (size_t p = 0; p < o.image.pixel_count(); ++p) {
                    const bool masked = rng.uniform() < mask_rate;
                    for (int ch = 0; ch < 3; ++ch) {
                        const float v = covariates.data[p * covariates.channels + g * 3 + ch];
                        o.image.data[p * 3 + ch] =
                            masked ? o.image.nodata
                                   : v + static_cast<float>(0.02 * rng.normal());
                    }
                }
                obs.push_back(std::move(o));
            }
        };
        add_copies(2020, 3, 0.3);
        add_copies(2019, 2, 0.3);
        CompositeParams params;
        params.target_year = 2020;
        params.season = static_cast<Season>(g % 3);
        params.sensor = Sensor::sar;
        params.min_obs = 2;
        params.lookback = 1;
        const RasterGrid comp = composite(obs, params);
        for (size_t p = 0; p < out.pixel_count(); ++p)
            for (int ch = 0; ch < 3; ++ch)
                out.data[p * out.channels + g * 3 + ch] = comp.data[p * 3 + ch];
    }
    return out;
}

// High-resolution stand-in for the reference product: the dense truth at 4x
// resolution with a small deterministic perturbation, split into quadrant
// tiles.
std::vector<RasterGrid> fabricate_hires_tiles(const RasterGrid& truth, uint64_t seed) {
    const int scale = 4;
    Rng rng(seed ^ 0xA15ULL);
    RasterGrid hires = RasterGrid::make(truth.width * scale, truth.height * scale, 1,
                                        truth.origin_x, truth.origin_y,
                                        truth.pixel_size / scale, truth.nodata);
    for (int row = 0; row < hires.height; ++row)
        for (int col = 0; col < hires.width; ++col) {
            const float base = truth.at(col / scale, row / scale);
            hires.at(col, row) =
                std::max(0.0f, base + static_cast<float>(0.1 * rng.normal()));
        }
    std::vector<RasterGrid> tiles;
    const int half_w = hires.width / 2, half_h = hires.height / 2;
    for (int ty = 0; ty < 2; ++ty) {
        for (int tx = 0; tx < 2; ++tx) {
            RasterGrid tile = RasterGrid::make(
                half_w, half_h, 1, hires.origin_x + tx * half_w * hires.pixel_size,
                hires.origin_y + ty * half_h * hires.pixel_size, hires.pixel_size,
                hires.nodata);
            for (int row = 0; row < half_h; ++row)
                for (int col = 0; col < half_w; ++col)
                    tile.at(col, row) = hires.at(tx * half_w + col, ty * half_h + row);
            tiles.push_back(std::move(tile));
        }
    }
    return tiles;
}

void run_pipeline(const PipelineArgs& cli_args) {
    PipelineArgs args = cli_args;
    if (!args.config.empty()) {
        const Config cfg = Config::from_file(args.config);
        args.seed = static_cast<uint64_t>(cfg.get_int("pipeline.seed", static_cast<int64_t>(args.seed)));
        args.size = static_cast<int>(cfg.get_int("pipeline.size", args.size));
        args.outlier_rate = cfg.get_double("pipeline.outlier_rate", args.outlier_rate);
        args.folds = static_cast<int>(cfg.get_int("pipeline.folds", args.folds));
        args.members = static_cast<int>(cfg.get_int("pipeline.members", args.members));
        args.epochs = static_cast<int>(cfg.get_int("train.epochs", args.epochs));
        args.batch = static_cast<int>(cfg.get_int("train.batch", args.batch));
        args.lr0 = cfg.get_double("train.lr0", args.lr0);
        args.base_filters = static_cast<int>(cfg.get_int("model.base_filters", args.base_filters));
        args.depth = static_cast<int>(cfg.get_int("model.depth", args.depth));
    }
    fs::create_directories(args.out);
    const fs::path out(args.out);

    // 1. Synthetic scene.
    std::cout << "[pipeline] synth scene " << args.size << "x" << args.size << "\n";
    const SynthScene scene = synth_scene(args.seed, args.size, args.outlier_rate);
    write_raster(scene.dense_truth, (out / "dense_truth.tif").string());
    write_raster(scene.sparse_target, (out / "sparse_target.tif").string());

    // 2. Seasonal composites rebuild the covariates from noisy acquisitions.
    std::cout << "[pipeline] seasonal composites\n";
    const RasterGrid covariates = composited_covariates(scene.covariates, args.seed);
    write_raster(covariates, (out / "covariates.tif").string());

    // 3. Tiles, folds, normalization, patch records.
    std::cout << "[pipeline] build dataset\n";
    DatasetBuildSpec spec;
    spec.out_dir = (out / "records").string();
    spec.tile_rows = args.tile_rows;
    spec.tile_cols = args.tile_cols;
    spec.folds = args.folds;
    spec.subfolds = args.members;
    spec.seed = args.seed;
    spec.year = 2020;
    const DatasetLayout layout = dataset_build(covariates, scene.sparse_target, spec);

    ModelConfig model_cfg;
    model_cfg.in_channels = covariates.channels;
    model_cfg.base_filters = args.base_filters;
    model_cfg.depth = args.depth;

    // Pooled test-region maps assembled fold by fold.
    RasterGrid height = RasterGrid::make(args.size, args.size, 1, 0, 0,
                                         covariates.pixel_size, -9999.0f, -9999.0f);
    RasterGrid total_var = height;
    RasterGrid calibrated_var = height;

    std::ofstream curves_csv((out / "calibration_curves.csv").string());
    curves_csv << "fold,stage,bin,mean_sigma,rmse,count\n" << std::setprecision(10);

    for (const FoldSpec& fold : layout.folds) {
        const std::string prefix =
            (fs::path(spec.out_dir) / ("fold" + std::to_string(fold.fold_id))).string();
        const OnlineStats stats = load_stats(prefix + "_stats.csv");

        // 4-5. Per-member weights and training.
        std::vector<ResUNetF> members;
        for (int s = 0; s < static_cast<int>(fold.sub_folds.size()); ++s) {
            const std::string sub = "_sub" + std::to_string(s);
            const auto train_records = read_records(prefix + sub + "_train.cuqr");
            const auto val_records = read_records(prefix + sub + "_val.cuqr");
            std::unique_ptr<WeightFunction> wf;
            if (!args.unweighted) {
                const auto samples =
                    sample_targets(train_records, 200000, args.seed + 13 * s);
                wf = std::make_unique<WeightFunction>(WeightFunction::fit(samples));
                if (s == 0) wf->save((out / ("fold" + std::to_string(fold.fold_id) +
                                             "_weights.cuqw")).string());
            }
            TrainConfig tcfg;
            tcfg.lr0 = args.lr0;
            tcfg.epochs = args.epochs;
            tcfg.batch = args.batch;
            tcfg.seed = args.seed + 97 * static_cast<uint64_t>(fold.fold_id) + s;
            std::cout << "[pipeline] train fold " << fold.fold_id << " member " << s
                      << " (" << train_records.size() << " patches)\n";
            ResUNetF model = train_model<float>(train_records, val_records, model_cfg,
                                                tcfg, wf.get());
            model.save((out / ("fold" + std::to_string(fold.fold_id) + "_member" +
                               std::to_string(s) + ".cuqm")).string());
            members.push_back(std::move(model));
        }

        // 6. Ensemble inference over the scene.
        std::cout << "[pipeline] infer fold " << fold.fold_id << "\n";
        const RasterGrid normalized = clamp_normalize(covariates, stats);
        std::vector<ResUNetF*> ptrs;
        for (auto& m : members) ptrs.push_back(&m);
        const EnsembleMaps maps = predict_map(ptrs, normalized);

        // 7. Scalar calibration on sub-fold validation tiles.
        std::set<int> val_tiles;
        for (const SubFold& sub : fold.sub_folds)
            val_tiles.insert(sub.val_tiles.begin(), sub.val_tiles.end());
        std::vector<double> variances, errors;
        for (int t : val_tiles) {
            const PixelRect rect = raster_rect(covariates, layout.tiles.tiles[t]);
            for (int row = rect.row0; row < rect.row0 + rect.rows; ++row)
                for (int col = rect.col0; col < rect.col0 + rect.cols; ++col) {
                    const float y = scene.sparse_target.at(col, row);
                    if (scene.sparse_target.is_nodata(y)) continue;
                    const float mu = maps.mean.at(col, row);
                    const float var = maps.total.at(col, row);
                    if (maps.mean.is_nodata(mu) || !(var > 0.0f)) continue;
                    variances.push_back(var);
                    errors.push_back(static_cast<double>(mu) - y);
                }
        }
        const CalibrationResult cal = calibrate(variances, errors);
        {
            std::ofstream os((out / ("fold" + std::to_string(fold.fold_id) + "_scale.txt"))
                                 .string());
            os << std::setprecision(17) << cal.scale << "\n";
        }
        for (const auto& [stage, curve] :
             {std::pair{std::string("pre"), cal.pre_curve},
              std::pair{std::string("post"), cal.post_curve}}) {
            for (size_t i = 0; i < curve.size(); ++i)
                curves_csv << fold.fold_id << "," << stage << "," << i << ","
                           << curve[i].mean_sigma << "," << curve[i].rmse << ","
                           << curve[i].count << "\n";
        }
        std::cout << "[pipeline] fold " << fold.fold_id << " calibration scale "
                  << cal.scale << " (ECE " << cal.pre_ece << " -> " << cal.post_ece
                  << ")\n";

        // Assemble this fold's test tiles into the pooled maps.
        for (int t : fold.test_tiles) {
            const PixelRect rect = raster_rect(covariates, layout.tiles.tiles[t]);
            for (int row = rect.row0; row < rect.row0 + rect.rows; ++row)
                for (int col = rect.col0; col < rect.col0 + rect.cols; ++col) {
                    height.at(col, row) = maps.mean.at(col, row);
                    total_var.at(col, row) = maps.total.at(col, row);
                    calibrated_var.at(col, row) =
                        maps.total.is_nodata(maps.total.at(col, row))
                            ? calibrated_var.nodata
                            : static_cast<float>(cal.scale * maps.total.at(col, row));
                }
        }
    }
    write_raster(height, (out / "height.tif").string());
    {
        RasterGrid sigma = total_var;
        for (auto& v : sigma.data)
            if (!sigma.is_nodata(v)) v = std::sqrt(v);
        write_raster(sigma, (out / "uncertainty_std.tif").string());
        RasterGrid cal_sigma = calibrated_var;
        for (auto& v : cal_sigma.data)
            if (!cal_sigma.is_nodata(v)) v = std::sqrt(v);
        write_raster(cal_sigma, (out / "uncertainty_std_calibrated.tif").string());
    }

    // 8. Harmonize the high-resolution stand-in reference onto the scene grid.
    std::cout << "[pipeline] harmonize reference\n";
    const auto hires = fabricate_hires_tiles(scene.dense_truth, args.seed);
    RasterGrid coarse_geom = scene.dense_truth;
    const RasterGrid reference = harmonize(coarse_geom, hires);
    write_raster(reference, (out / "reference.tif").string());

    // 9. Evaluate pooled test-region predictions against the harmonized
    // reference, 3-40 m filter.
    std::vector<EvalPair> pairs;
    for (int row = 0; row < args.size; ++row)
        for (int col = 0; col < args.size; ++col) {
            const float p = height.at(col, row);
            const float r = reference.at(col, row);
            if (height.is_nodata(p) || reference.is_nodata(r)) continue;
            pairs.push_back({p, r, 0.0, 0.0});
        }
    const auto filtered = filter_range(pairs);
    const EvalReport report = metrics(filtered);
    {
        std::ofstream os((out / "report.csv").string());
        os << "metric,value\n" << std::setprecision(10);
        os << "r2," << report.r2 << "\nrmse," << report.rmse << "\nmae," << report.mae
           << "\nbias," << report.bias << "\nn," << report.n << "\n";
    }
    const DensityScatter scatter = density_scatter(filtered);
    {
        std::ofstream os((out / "scatter.csv").string());
        os << "# slope," << std::setprecision(10) << scatter.slope << ",intercept,"
           << scatter.intercept << "\n";
        os << "ref_bin,pred_bin,count\n";
        for (int r = 0; r < scatter.n_bins; ++r)
            for (int p = 0; p < scatter.n_bins; ++p)
                if (scatter.at(r, p) > 0)
                    os << r << "," << p << "," << scatter.at(r, p) << "\n";
    }
    std::cout << "[pipeline] done: r2 " << report.r2 << ", rmse " << report.rmse
              << " m, mae " << report.mae << " m, bias " << report.bias << " m (n "
              << report.n << ") -> " << args.out << "\n";
}

}  // namespace

void register_pipeline(CLI::App& app) {
    auto args = std::make_shared<PipelineArgs>();
    CLI::App* cmd = app.add_subcommand(
        "pipeline",
        "Synthetic end-to-end run: synth, composite, dataset, weights, train, infer, "
        "calibrate, harmonize, evaluate");
    cmd->add_option("--seed", args->seed, "Run seed");
    cmd->add_option("--size", args->size, "Scene size, pixels");
    cmd->add_option("--outlier-rate", args->outlier_rate, "Sparse-target outlier fraction");
    cmd->add_option("--tiles-rows", args->tile_rows, "Tile grid rows");
    cmd->add_option("--tiles-cols", args->tile_cols, "Tile grid cols");
    cmd->add_option("--folds", args->folds, "Spatial folds");
    cmd->add_option("--members", args->members, "Ensemble members (sub-folds) per fold");
    cmd->add_option("--epochs", args->epochs, "Training epochs");
    cmd->add_option("--batch", args->batch, "Batch size");
    cmd->add_option("--lr0", args->lr0, "Initial learning rate");
    cmd->add_option("--base-filters", args->base_filters, "Model width");
    cmd->add_option("--depth", args->depth, "Model depth");
    cmd->add_flag("--unweighted", args->unweighted, "Skip the density weighting");
    cmd->add_option("--config", args->config, "key=value config file");
    cmd->add_option("--out", args->out, "Output directory")->required();
    cmd->callback([args] { run_pipeline(*args); });
}

}  // namespace canopyuq::cli
