#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "canopyuq/calibrate.hpp"
#include "canopyuq/raster_io.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct CalibrateArgs {
    std::string pred;
    std::string uncertainty;
    int band = 0;
    std::string uncertainty_kind = "std";  // what the band holds
    std::string reference;
    int n_bins = 10;
    std::string out_scale;
    std::string out_curves;
};

void run_calibrate(const CalibrateArgs& args) {
    const RasterGrid pred = read_raster(args.pred);
    const RasterGrid unc = read_raster(args.uncertainty);
    const RasterGrid ref = read_raster(args.reference);
    if (!pred.same_geometry(unc) || !pred.same_geometry(ref))
        throw DataError("calibrate: prediction, uncertainty, and reference grids differ");
    if (args.band < 0 || args.band >= unc.channels)
        throw ArgError("calibrate: --band out of range");

    std::vector<double> variances, errors;
    for (size_t p = 0; p < pred.pixel_count(); ++p) {
        const float pv = pred.data[p * pred.channels];
        const float uv = unc.data[p * unc.channels + args.band];
        const float rv = ref.data[p * ref.channels];
        if (pred.is_nodata(pv) || unc.is_nodata(uv) || ref.is_nodata(rv)) continue;
        const double var = args.uncertainty_kind == "std"
                               ? static_cast<double>(uv) * uv
                               : static_cast<double>(uv);
        if (!(var > 0.0)) continue;
        variances.push_back(var);
        errors.push_back(static_cast<double>(pv) - rv);
    }

    const CalibrationResult result = calibrate(variances, errors, args.n_bins);
    {
        std::ofstream os(args.out_scale, std::ios::trunc);
        if (!os) throw DataError(args.out_scale + ": cannot open for writing");
        os << std::setprecision(17) << result.scale << "\n";
    }
    if (!args.out_curves.empty()) {
        std::ofstream os(args.out_curves, std::ios::trunc);
        if (!os) throw DataError(args.out_curves + ": cannot open for writing");
        os << "stage,bin,mean_sigma,rmse,count\n" << std::setprecision(10);
        for (size_t i = 0; i < result.pre_curve.size(); ++i)
            os << "pre," << i << "," << result.pre_curve[i].mean_sigma << ","
               << result.pre_curve[i].rmse << "," << result.pre_curve[i].count << "\n";
        for (size_t i = 0; i < result.post_curve.size(); ++i)
            os << "post," << i << "," << result.post_curve[i].mean_sigma << ","
               << result.post_curve[i].rmse << "," << result.post_curve[i].count << "\n";
    }
    std::cout << "calibrate: " << variances.size() << " samples, scale " << result.scale
              << ", ECE " << result.pre_ece << " -> " << result.post_ece << "\n";
}

}  // namespace

void register_calibrate(CLI::App& app) {
    auto args = std::make_shared<CalibrateArgs>();
    CLI::App* cmd = app.add_subcommand(
        "calibrate", "Fit the scalar uncertainty calibration factor on validation data");
    cmd->add_option("--pred", args->pred, "Prediction raster")->required();
    cmd->add_option("--uncertainty", args->uncertainty, "Uncertainty raster")->required();
    cmd->add_option("--band", args->band, "Uncertainty band index");
    cmd->add_option("--uncertainty-kind", args->uncertainty_kind,
                    "Whether the band holds 'std' (as written by infer) or 'var'")
        ->check(CLI::IsMember({"std", "var"}));
    cmd->add_option("--reference", args->reference, "Reference raster")->required();
    cmd->add_option("--bins", args->n_bins, "Calibration curve bins");
    cmd->add_option("--out-scale", args->out_scale, "Output text file for the scale")
        ->required();
    cmd->add_option("--out-curves", args->out_curves, "Output CSV for pre/post curves");
    cmd->callback([args] { run_calibrate(*args); });
}

}  // namespace canopyuq::cli
