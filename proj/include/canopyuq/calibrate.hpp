#pragma once

// Scalar calibration of ensemble total uncertainty: find s so that s * var
// matches realized squared errors on a validation set, plus the calibration
// curve and RMSE-vs-recall diagnostics. Calibration never touches the
// predictions themselves, only the uncertainty channel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "canopyuq/core.hpp"

namespace canopyuq {

// Minimizer of sum_i [ log(s * var_i) + err_i^2 / (s * var_i) ], the Gaussian
// NLL in the variance scale; closed form s* = mean(err^2 / var).
inline double fit_scale(std::span<const double> variances, std::span<const double> errors) {
    if (variances.size() != errors.size())
        throw ArgError("fit_scale: variance/error length mismatch");
    if (variances.size() < 100)
        throw DataError("fit_scale: need at least 100 validation samples, got " +
                        std::to_string(variances.size()));
    double sum = 0.0;
    for (size_t i = 0; i < variances.size(); ++i) {
        if (!(variances[i] > 0.0))
            throw DataError("fit_scale: non-positive predicted variance at sample " +
                            std::to_string(i));
        sum += errors[i] * errors[i] / variances[i];
    }
    const double s = sum / static_cast<double>(variances.size());
    if (!(s > 0.0)) throw NumericError("fit_scale: degenerate scale");
    return s;
}

struct CurvePoint {
    double mean_sigma = 0.0;  // mean predicted std in the bin, meters
    double rmse = 0.0;        // realized RMSE in the bin, meters
    int64_t count = 0;
};

// Equal-count bins by predicted std; perfect calibration puts every point on
// the identity line.
inline std::vector<CurvePoint> calibration_curve(std::span<const double> sigmas,
                                                 std::span<const double> errors,
                                                 int n_bins = 10) {
    if (sigmas.size() != errors.size())
        throw ArgError("calibration_curve: sigma/error length mismatch");
    if (sigmas.empty()) throw DataError("calibration_curve: empty input");
    if (n_bins < 1 || static_cast<size_t>(n_bins) > sigmas.size())
        throw ArgError("calibration_curve: need 1 <= n_bins <= sample count");

    std::vector<size_t> order(sigmas.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return sigmas[a] < sigmas[b]; });

    std::vector<CurvePoint> curve(n_bins);
    const size_t n = order.size();
    for (int bin = 0; bin < n_bins; ++bin) {
        const size_t begin = n * bin / n_bins;
        const size_t end = n * (bin + 1) / n_bins;
        double sum_sigma = 0.0, sum_sq = 0.0;
        for (size_t i = begin; i < end; ++i) {
            sum_sigma += sigmas[order[i]];
            sum_sq += errors[order[i]] * errors[order[i]];
        }
        const auto count = static_cast<int64_t>(end - begin);
        curve[bin].count = count;
        if (count > 0) {
            curve[bin].mean_sigma = sum_sigma / static_cast<double>(count);
            curve[bin].rmse = std::sqrt(sum_sq / static_cast<double>(count));
        }
    }
    return curve;
}

// Sorted ascending by predicted std; entry r-1 is the RMSE of the most
// confident r% of samples, r = 1..100. Each prefix is accumulated in original
// input order, so the 100% point is bit-identical to the global RMSE computed
// directly over the input.
inline std::vector<double> rmse_recall_curve(std::span<const double> sigmas,
                                             std::span<const double> errors) {
    if (sigmas.size() != errors.size())
        throw ArgError("rmse_recall_curve: sigma/error length mismatch");
    if (sigmas.empty()) throw DataError("rmse_recall_curve: empty input");
    const size_t n = sigmas.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return sigmas[a] < sigmas[b]; });
    std::vector<size_t> rank(n);
    for (size_t i = 0; i < n; ++i) rank[order[i]] = i;

    std::vector<double> curve(100);
    for (int r = 1; r <= 100; ++r) {
        size_t k = static_cast<size_t>(static_cast<uint64_t>(n) * r / 100);
        if (k == 0) k = 1;
        double sq = 0.0;
        for (size_t i = 0; i < n; ++i)
            if (rank[i] < k) sq += errors[i] * errors[i];
        curve[r - 1] = std::sqrt(sq / static_cast<double>(k));
    }
    return curve;
}

// Count-weighted mean |bin RMSE - bin mean sigma|, meters.
inline double expected_calibration_error(const std::vector<CurvePoint>& curve) {
    double weighted = 0.0;
    int64_t total = 0;
    for (const CurvePoint& pt : curve) {
        weighted += static_cast<double>(pt.count) * std::abs(pt.rmse - pt.mean_sigma);
        total += pt.count;
    }
    return total > 0 ? weighted / static_cast<double>(total) : 0.0;
}

struct CalibrationResult {
    double scale = 1.0;
    std::vector<CurvePoint> pre_curve;
    std::vector<CurvePoint> post_curve;
    double pre_ece = 0.0;
    double post_ece = 0.0;
};

inline CalibrationResult calibrate(std::span<const double> variances,
                                   std::span<const double> errors, int n_bins = 10) {
    CalibrationResult result;
    result.scale = fit_scale(variances, errors);
    std::vector<double> pre_sigma(variances.size()), post_sigma(variances.size());
    for (size_t i = 0; i < variances.size(); ++i) {
        pre_sigma[i] = std::sqrt(variances[i]);
        post_sigma[i] = std::sqrt(result.scale * variances[i]);
    }
    result.pre_curve = calibration_curve(pre_sigma, errors, n_bins);
    result.post_curve = calibration_curve(post_sigma, errors, n_bins);
    result.pre_ece = expected_calibration_error(result.pre_curve);
    result.post_ece = expected_calibration_error(result.post_curve);
    return result;
}

}  // namespace canopyuq
