#include <iostream>
#include <memory>

#include "canopyuq/harmonize.hpp"
#include "canopyuq/raster_io.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct HarmonizeArgs {
    std::string coarse_geometry;
    std::string hires_manifest;
    double percentile = 98.0;
    std::string out;
};

void run_harmonize(const HarmonizeArgs& args) {
    const RasterGrid coarse = read_raster(args.coarse_geometry);
    const auto entries = read_manifest(args.hires_manifest);
    std::vector<RasterGrid> tiles;
    tiles.reserve(entries.size());
    for (const auto& e : entries) tiles.push_back(read_raster(e.path));
    if (!(args.percentile > 0.0) || args.percentile > 100.0)
        throw ArgError("--percentile must be in (0, 100]");

    const RasterGrid out = harmonize(coarse, tiles, args.percentile / 100.0);
    write_raster(out, args.out);
    int64_t covered = 0;
    for (const float v : out.data) covered += !out.is_nodata(v);
    std::cout << "harmonize: " << tiles.size() << " hires tiles onto " << out.width << "x"
              << out.height << " grid, " << covered << " covered pixels -> " << args.out
              << "\n";
}

}  // namespace

void register_harmonize(CLI::App& app) {
    auto args = std::make_shared<HarmonizeArgs>();
    CLI::App* cmd = app.add_subcommand(
        "harmonize", "Reduce high-resolution reference tiles to a coarse grid percentile");
    cmd->add_option("--coarse-geometry", args->coarse_geometry,
                    "Raster whose grid defines the coarse zones")
        ->required();
    cmd->add_option("--hires-manifest", args->hires_manifest,
                    "Manifest of high-resolution tiles")
        ->required();
    cmd->add_option("--percentile", args->percentile, "Reduction percentile (default 98)");
    cmd->add_option("--out", args->out, "Output raster")->required();
    cmd->callback([args] { run_harmonize(*args); });
}

}  // namespace canopyuq::cli
