#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>

#include "canopyuq/dataset.hpp"
#include "canopyuq/raster_io.hpp"
#include "cli_common.hpp"

namespace fs = std::filesystem;

namespace canopyuq::cli {

RasterGrid stack_covariates(const std::vector<std::string>& paths) {
    if (paths.empty()) throw DataError("no covariate rasters given");
    std::vector<RasterGrid> rasters;
    int channels = 0;
    for (const std::string& p : paths) {
        rasters.push_back(read_raster(p));
        if (!rasters.back().same_geometry(rasters.front()))
            throw DataError(p + ": covariate grids are not co-registered");
        channels += rasters.back().channels;
    }
    if (rasters.size() == 1) return std::move(rasters.front());
    RasterGrid out = RasterGrid::make(rasters[0].width, rasters[0].height, channels,
                                      rasters[0].origin_x, rasters[0].origin_y,
                                      rasters[0].pixel_size, rasters[0].nodata);
    out.crs_tag = rasters[0].crs_tag;
    for (size_t p = 0; p < out.pixel_count(); ++p) {
        int ch = 0;
        for (const RasterGrid& r : rasters) {
            for (int rc = 0; rc < r.channels; ++rc) {
                float v = r.data[p * r.channels + rc];
                // Normalize foreign nodata sentinels to the stack's sentinel.
                if (r.is_nodata(v)) v = out.nodata;
                out.data[p * channels + ch] = v;
                ++ch;
            }
        }
    }
    return out;
}

void save_stats(const OnlineStats& stats, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError(path + ": cannot open for writing");
    os << "channel,count,mean,m2\n";
    os << std::setprecision(17);
    for (int ch = 0; ch < stats.channels(); ++ch)
        os << ch << "," << stats.count[ch] << "," << stats.mean[ch] << "," << stats.m2[ch]
           << "\n";
}

OnlineStats load_stats(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError(path + ": cannot open stats file");
    std::string header;
    std::getline(is, header);
    std::vector<uint64_t> counts;
    std::vector<double> means, m2s;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        int ch;
        uint64_t count;
        double mean, m2;
        if (!(ss >> ch >> count >> mean >> m2))
            throw DataError(path + ": malformed stats line: " + line);
        counts.push_back(count);
        means.push_back(mean);
        m2s.push_back(m2);
    }
    OnlineStats stats(static_cast<int>(counts.size()));
    stats.count = counts;
    stats.mean = means;
    stats.m2 = m2s;
    return stats;
}

DatasetLayout dataset_build(const RasterGrid& covariates, const RasterGrid& target,
                            const DatasetBuildSpec& spec) {
    if (!covariates.same_geometry(target))
        throw DataError("dataset: covariates and target are not co-registered");
    DatasetLayout layout;
    layout.tiles = make_tiles(covariates.bbox(), spec.tile_rows, spec.tile_cols);
    layout.folds = spatial_folds(layout.tiles.count(), spec.folds, spec.seed, spec.subfolds);

    fs::create_directories(spec.out_dir);
    {
        std::ofstream os(fs::path(spec.out_dir) / "folds.txt");
        os << "# fold assignments, seed " << spec.seed << "\n";
        for (const FoldSpec& f : layout.folds) {
            os << "[fold " << f.fold_id << "]\ntest =";
            for (int t : f.test_tiles) os << " " << t;
            os << "\n";
            for (size_t s = 0; s < f.sub_folds.size(); ++s) {
                os << "sub" << s << "_val =";
                for (int t : f.sub_folds[s].val_tiles) os << " " << t;
                os << "\n";
            }
        }
    }

    OnlineStats global_stats(covariates.channels);
    if (spec.global_stats) stats_accumulate(global_stats, covariates);

    for (const FoldSpec& fold : layout.folds) {
        OnlineStats stats(covariates.channels);
        if (spec.global_stats) {
            stats = global_stats;
        } else {
            // Per-training-fold statistics over the fold's training tiles.
            for (int t : fold.train_tiles) {
                const PixelRect rect = raster_rect(covariates, layout.tiles.tiles[t]);
                for (int row = rect.row0; row < rect.row0 + rect.rows; ++row)
                    for (int col = rect.col0; col < rect.col0 + rect.cols; ++col)
                        for (int ch = 0; ch < covariates.channels; ++ch) {
                            const float v = covariates.at(col, row, ch);
                            if (!covariates.is_nodata(v)) stats.add_value(ch, v);
                        }
            }
        }
        const std::string prefix =
            (fs::path(spec.out_dir) / ("fold" + std::to_string(fold.fold_id))).string();
        save_stats(stats, prefix + "_stats.csv");
        const RasterGrid normalized = clamp_normalize(covariates, stats);

        std::map<int, std::vector<PatchRecord>> per_tile;
        for (int t = 0; t < layout.tiles.count(); ++t) {
            const PixelRect rect = raster_rect(normalized, layout.tiles.tiles[t]);
            per_tile[t] = extract_patches(normalized, target, rect, spec.patch_size,
                                          spec.overlap, spec.min_density,
                                          static_cast<uint32_t>(t),
                                          static_cast<uint16_t>(spec.year));
        }
        const auto write_split = [&](const std::string& name,
                                     const std::vector<int>& tile_ids) {
            RecordWriter writer(prefix + name, spec.patch_size, covariates.channels);
            for (int t : tile_ids)
                for (const PatchRecord& rec : per_tile[t]) writer.append(rec);
            return writer.count();
        };
        const size_t n_test = write_split("_test.cuqr", fold.test_tiles);
        std::cout << "fold " << fold.fold_id << ": " << n_test << " test patches";
        for (size_t s = 0; s < fold.sub_folds.size(); ++s) {
            const std::string tag = "_sub" + std::to_string(s);
            const size_t n_train =
                write_split(tag + "_train.cuqr", fold.sub_folds[s].train_tiles);
            const size_t n_val = write_split(tag + "_val.cuqr", fold.sub_folds[s].val_tiles);
            std::cout << ", sub" << s << " " << n_train << "/" << n_val;
        }
        std::cout << "\n";
    }
    return layout;
}

namespace {

struct BuildArgs {
    std::string covariates_manifest;
    std::string target;
    std::string tiles = "10x10";
    int folds = 5;
    int subfolds = 5;
    int patch_size = 64;
    double overlap = 0.25;
    double min_density = 0.01;
    uint64_t seed = 0;
    int year = 0;
    std::string stats_scope = "fold";
    std::string out;
};

std::pair<int, int> parse_tiles(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw ArgError("--tiles expects ROWSxCOLS, e.g. 10x10");
    try {
        return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
    } catch (...) {
        throw ArgError("--tiles expects ROWSxCOLS, e.g. 10x10");
    }
}

void run_build(const BuildArgs& args) {
    const auto entries = read_manifest(args.covariates_manifest);
    std::vector<std::string> paths;
    for (const auto& e : entries) paths.push_back(e.path);
    const RasterGrid covariates = stack_covariates(paths);
    const RasterGrid target = read_raster(args.target);

    DatasetBuildSpec spec;
    spec.out_dir = args.out;
    std::tie(spec.tile_rows, spec.tile_cols) = parse_tiles(args.tiles);
    spec.folds = args.folds;
    spec.subfolds = args.subfolds;
    spec.patch_size = args.patch_size;
    spec.overlap = args.overlap;
    spec.min_density = args.min_density;
    spec.seed = args.seed;
    spec.year = args.year;
    spec.global_stats = args.stats_scope == "global";
    dataset_build(covariates, target, spec);
}

struct SynthArgs {
    uint64_t seed = 0;
    int size = 640;
    double outlier_rate = 0.05;
    std::string out;
};

void run_synth(const SynthArgs& args) {
    const SynthScene scene = synth_scene(args.seed, args.size, args.outlier_rate);
    fs::create_directories(args.out);
    write_raster(scene.covariates, (fs::path(args.out) / "covariates.tif").string());
    write_raster(scene.dense_truth, (fs::path(args.out) / "dense_truth.tif").string());
    write_raster(scene.sparse_target, (fs::path(args.out) / "sparse_target.tif").string());
    int64_t n_samples = 0;
    for (const float v : scene.sparse_target.data)
        n_samples += !scene.sparse_target.is_nodata(v);
    std::cout << "synth: " << args.size << "x" << args.size << " scene, " << n_samples
              << " sparse samples -> " << args.out << "\n";
}

}  // namespace

void register_dataset(CLI::App& app) {
    auto build = std::make_shared<BuildArgs>();
    CLI::App* bcmd = app.add_subcommand(
        "build-dataset", "Tile, fold, normalize, and extract patch records");
    bcmd->add_option("--covariates", build->covariates_manifest,
                     "Manifest of co-registered rasters (channels are stacked)")
        ->required();
    bcmd->add_option("--target", build->target, "Sparse target raster")->required();
    bcmd->add_option("--tiles", build->tiles, "Tile grid, ROWSxCOLS");
    bcmd->add_option("--folds", build->folds, "Number of spatial folds");
    bcmd->add_option("--subfolds", build->subfolds, "Sub-folds per fold");
    bcmd->add_option("--patch-size", build->patch_size, "Patch window, pixels");
    bcmd->add_option("--overlap", build->overlap, "Window overlap fraction");
    bcmd->add_option("--min-density", build->min_density,
                     "Minimum valid-target fraction per patch");
    bcmd->add_option("--seed", build->seed, "Fold assignment seed");
    bcmd->add_option("--year", build->year, "Year recorded in patch metadata");
    bcmd->add_option("--stats-scope", build->stats_scope,
                     "Normalization statistics scope")
        ->check(CLI::IsMember({"fold", "global"}));
    bcmd->add_option("--out", build->out, "Output directory")->required();
    bcmd->callback([build] { run_build(*build); });

    auto synth = std::make_shared<SynthArgs>();
    CLI::App* scmd = app.add_subcommand("synth", "Generate a synthetic scene");
    scmd->add_option("--seed", synth->seed, "Scene seed");
    scmd->add_option("--size", synth->size, "Scene size, pixels (>= 64)");
    scmd->add_option("--outlier-rate", synth->outlier_rate,
                     "Fraction of sparse samples replaced by outliers");
    scmd->add_option("--out", synth->out, "Output directory")->required();
    scmd->callback([synth] { run_synth(*synth); });
}

}  // namespace canopyuq::cli
