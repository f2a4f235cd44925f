#include <iostream>
#include <memory>

#include "canopyuq/composite.hpp"
#include "canopyuq/raster_io.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct CompositeArgs {
    int year = 0;
    std::string season = "summer";
    std::string sensor = "optical";
    int min_obs = 1;
    int lookback = 2;
    int qa_channel = -1;
    std::string manifest;
    std::string out;
};

void run_composite(const CompositeArgs& args) {
    const auto entries = read_manifest(args.manifest);
    CompositeParams params;
    params.target_year = args.year;
    params.season = parse_season(args.season);
    params.sensor = parse_sensor(args.sensor);
    params.min_obs = args.min_obs;
    params.lookback = args.lookback;

    std::vector<Observation> observations;
    observations.reserve(entries.size());
    for (const ManifestEntry& e : entries) {
        if (!e.has_year)
            throw DataError(args.manifest + ": every line needs 'path year' for compositing");
        Observation obs;
        obs.image = read_raster(e.path);
        obs.year = e.year;
        obs.season = params.season;
        obs.sensor = params.sensor;
        obs.qa_channel = args.qa_channel;
        observations.push_back(std::move(obs));
    }

    const RasterGrid out = composite(observations, params);
    write_raster(out, args.out);
    int64_t covered = 0;
    for (const float v : out.data) covered += !out.is_nodata(v);
    std::cout << "composite: " << out.width << "x" << out.height << "x" << out.channels
              << ", " << covered << "/" << out.value_count() << " values covered -> "
              << args.out << "\n";
}

}  // namespace

void register_composite(CLI::App& app) {
    auto args = std::make_shared<CompositeArgs>();
    CLI::App* cmd = app.add_subcommand(
        "composite", "Seasonal median composite with per-pixel fallback to prior years");
    cmd->add_option("--year", args->year, "Target year")->required();
    cmd->add_option("--season", args->season, "winter|summer|fall")
        ->check(CLI::IsMember({"winter", "summer", "fall"}));
    cmd->add_option("--sensor", args->sensor, "optical|sar")
        ->check(CLI::IsMember({"optical", "sar"}));
    cmd->add_option("--min-obs", args->min_obs, "Minimum valid observations per pixel (N)");
    cmd->add_option("--lookback", args->lookback, "Years to fall back (W)");
    cmd->add_option("--qa-channel", args->qa_channel,
                    "Channel index holding QA bit flags (-1 = none)");
    cmd->add_option("--manifest", args->manifest,
                    "Text file: one 'path year' per line")
        ->required();
    cmd->add_option("--out", args->out, "Output raster path")->required();
    cmd->callback([args] { run_composite(*args); });
}

}  // namespace canopyuq::cli
