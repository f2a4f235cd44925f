#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "canopyuq/evaluate.hpp"
#include "canopyuq/raster_io.hpp"
#include "cli_common.hpp"

namespace canopyuq::cli {

namespace {

struct EvaluateArgs {
    std::string pred;
    std::string reference;
    double lo = 3.0;
    double hi = 40.0;
    bool filter_both = false;
    int scatter_bins = 40;
    std::string out_report;
    std::string out_scatter;
};

void run_evaluate(const EvaluateArgs& args) {
    const RasterGrid pred = read_raster(args.pred);
    const RasterGrid ref = read_raster(args.reference);
    if (!pred.same_geometry(ref))
        throw DataError("evaluate: prediction and reference grids differ");

    std::vector<EvalPair> pairs;
    for (int row = 0; row < pred.height; ++row) {
        for (int col = 0; col < pred.width; ++col) {
            const float pv = pred.at(col, row, 0);
            const float rv = ref.at(col, row, 0);
            if (pred.is_nodata(pv) || ref.is_nodata(rv)) continue;
            EvalPair pair;
            pair.pred = pv;
            pair.ref = rv;
            pair.x = pred.origin_x + (col + 0.5) * pred.pixel_size;
            pair.y = pred.origin_y + (row + 0.5) * pred.pixel_size;
            pairs.push_back(pair);
        }
    }
    const auto filtered = filter_range(pairs, args.lo, args.hi, args.filter_both);
    const EvalReport report = metrics(filtered);

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!args.out_report.empty()) {
        file.open(args.out_report, std::ios::trunc);
        if (!file) throw DataError(args.out_report + ": cannot open for writing");
        out = &file;
    }
    *out << "metric,value\n"
         << std::setprecision(10) << "r2," << (report.r2_defined ? std::to_string(report.r2)
                                                                 : std::string("undefined"))
         << "\nrmse," << report.rmse << "\nmae," << report.mae << "\nbias," << report.bias
         << "\nn," << report.n << "\nfilter_lo," << args.lo << "\nfilter_hi," << args.hi
         << "\n";
    if (out == &std::cout) std::cout.flush();

    if (!args.out_scatter.empty()) {
        const DensityScatter scatter = density_scatter(filtered, args.scatter_bins);
        std::ofstream os(args.out_scatter, std::ios::trunc);
        if (!os) throw DataError(args.out_scatter + ": cannot open for writing");
        os << "# slope," << std::setprecision(10) << scatter.slope << ",intercept,"
           << scatter.intercept << "\n";
        os << "ref_bin,pred_bin,count\n";
        for (int r = 0; r < scatter.n_bins; ++r)
            for (int p = 0; p < scatter.n_bins; ++p)
                if (scatter.at(r, p) > 0) os << r << "," << p << "," << scatter.at(r, p) << "\n";
    }
    if (!args.out_report.empty())
        std::cout << "evaluate: n " << report.n << ", rmse " << report.rmse << " -> "
                  << args.out_report << "\n";
}

}  // namespace

void register_evaluate(CLI::App& app) {
    auto args = std::make_shared<EvaluateArgs>();
    CLI::App* cmd =
        app.add_subcommand("evaluate", "Regression metrics against a reference raster");
    cmd->add_option("--pred", args->pred, "Prediction raster")->required();
    cmd->add_option("--reference", args->reference, "Reference raster")->required();
    cmd->add_option("--lo", args->lo, "Lower reference bound, meters (inclusive)");
    cmd->add_option("--hi", args->hi, "Upper reference bound, meters (inclusive)");
    cmd->add_flag("--filter-both", args->filter_both,
                  "Apply the range filter to predictions as well");
    cmd->add_option("--scatter-bins", args->scatter_bins, "Density scatter grid size");
    cmd->add_option("--out-report", args->out_report, "Report CSV (stdout when omitted)");
    cmd->add_option("--out-scatter", args->out_scatter, "Density scatter CSV");
    cmd->callback([args] { run_evaluate(*args); });
}

}  // namespace canopyuq::cli
