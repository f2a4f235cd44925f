#include <iostream>
#include <memory>

#include "canopyuq/weighting.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct WeightsArgs {
    std::vector<std::string> records;
    uint64_t samples = 10000000;
    std::string bandwidth = "auto";
    std::string clip = "0.1,10";
    uint64_t seed = 0;
    std::string out;
};

void run_fit_weights(const WeightsArgs& args) {
    std::vector<PatchRecord> records;
    for (const std::string& path : args.records) {
        auto part = read_records(path);
        records.insert(records.end(), std::make_move_iterator(part.begin()),
                       std::make_move_iterator(part.end()));
    }
    const auto values = sample_targets(records, args.samples, args.seed);

    double bandwidth = 0.0;  // 0 selects Silverman's rule
    if (args.bandwidth != "auto") {
        try {
            bandwidth = std::stod(args.bandwidth);
        } catch (...) {
            throw ArgError("--bandwidth expects 'auto' or a number");
        }
        if (!(bandwidth > 0.0)) throw ArgError("--bandwidth must be positive");
    }
    const auto comma = args.clip.find(',');
    if (comma == std::string::npos) throw ArgError("--clip expects LO,HI");
    double clip_lo = 0.0, clip_hi = 0.0;
    try {
        clip_lo = std::stod(args.clip.substr(0, comma));
        clip_hi = std::stod(args.clip.substr(comma + 1));
    } catch (...) {
        throw ArgError("--clip expects LO,HI");
    }

    const WeightFunction wf = WeightFunction::fit(values, bandwidth, clip_lo, clip_hi);
    wf.save(args.out);
    std::cout << "fit-weights: " << values.size() << " samples, bandwidth "
              << wf.bandwidth() << ", clip [" << clip_lo << ", " << clip_hi << "] -> "
              << args.out << "\n";
}

}  // namespace

void register_weights(CLI::App& app) {
    auto args = std::make_shared<WeightsArgs>();
    CLI::App* cmd = app.add_subcommand(
        "fit-weights", "Fit the inverse-density weight table from target samples");
    cmd->add_option("--records", args->records, "Patch record files")->required();
    cmd->add_option("--samples", args->samples, "Number of target samples to draw");
    cmd->add_option("--bandwidth", args->bandwidth, "KDE bandwidth, or 'auto'");
    cmd->add_option("--clip", args->clip, "Weight clip range LO,HI");
    cmd->add_option("--seed", args->seed, "Sampling seed");
    cmd->add_option("--out", args->out, "Output weight table (CUQW)")->required();
    cmd->callback([args] { run_fit_weights(*args); });
}

}  // namespace canopyuq::cli
