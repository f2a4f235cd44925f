#pragma once

// Evaluation metrics, target filtering rules, and the density scatter export.
// Bias convention: mean(prediction - reference), positive when the model
// overestimates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"

namespace canopyuq {

struct EvalPair {
    double pred = 0.0;
    double ref = 0.0;
    double x = 0.0;  // map coordinates, carried through for spatial joins
    double y = 0.0;
};

// Keep pairs whose reference lies in [lo, hi] (inclusive); optionally filter
// on the prediction side as well.
inline std::vector<EvalPair> filter_range(std::span<const EvalPair> pairs, double lo = 3.0,
                                          double hi = 40.0, bool both_sides = false) {
    std::vector<EvalPair> out;
    out.reserve(pairs.size());
    for (const EvalPair& p : pairs) {
        if (p.ref < lo || p.ref > hi) continue;
        if (both_sides && (p.pred < lo || p.pred > hi)) continue;
        out.push_back(p);
    }
    return out;
}

struct GediSample {
    double rh98 = 0.0;
    bool quality_good = true;
    bool beam_strong = true;
    double x = 0.0;
    double y = 0.0;
};

// Drop negative heights, heights above 40 m, low-quality flags, and weak beams.
inline std::vector<GediSample> filter_gedi(std::span<const GediSample> samples) {
    std::vector<GediSample> out;
    out.reserve(samples.size());
    for (const GediSample& s : samples) {
        if (s.rh98 < 0.0 || s.rh98 > 40.0) continue;
        if (!s.quality_good || !s.beam_strong) continue;
        out.push_back(s);
    }
    return out;
}

struct EvalReport {
    double r2 = 0.0;
    double rmse = 0.0;  // meters
    double mae = 0.0;   // meters
    double bias = 0.0;  // meters
    int64_t n = 0;
    double filter_lo = 0.0;
    double filter_hi = 0.0;
    bool r2_defined = true;  // false when the reference has zero variance
};

inline EvalReport metrics(std::span<const EvalPair> pairs) {
    if (pairs.size() < 2) throw DataError("metrics: need at least 2 pairs");
    double sum_ref = 0.0;
    for (const EvalPair& p : pairs) sum_ref += p.ref;
    const double mean_ref = sum_ref / static_cast<double>(pairs.size());

    double sq_err = 0.0, abs_err = 0.0, bias = 0.0, sq_ref = 0.0;
    for (const EvalPair& p : pairs) {
        const double d = p.pred - p.ref;
        sq_err += d * d;
        abs_err += std::abs(d);
        bias += d;
        sq_ref += (p.ref - mean_ref) * (p.ref - mean_ref);
    }
    const double n = static_cast<double>(pairs.size());
    EvalReport rep;
    rep.n = static_cast<int64_t>(pairs.size());
    rep.rmse = std::sqrt(sq_err / n);
    rep.mae = abs_err / n;
    rep.bias = bias / n;
    if (sq_ref > 0.0) {
        rep.r2 = 1.0 - sq_err / sq_ref;
    } else {
        rep.r2_defined = false;
        rep.r2 = std::nan("");
    }
    return rep;
}

struct DensityScatter {
    int n_bins = 0;
    double lo = 0.0;
    double hi = 40.0;
    std::vector<int64_t> counts;  // n_bins x n_bins, row = reference bin
    double slope = 0.0;           // OLS fit of prediction on reference
    double intercept = 0.0;

    int64_t& at(int ref_bin, int pred_bin) {
        return counts[static_cast<size_t>(ref_bin) * n_bins + pred_bin];
    }
    int64_t at(int ref_bin, int pred_bin) const {
        return counts[static_cast<size_t>(ref_bin) * n_bins + pred_bin];
    }
};

// 2-D histogram over [lo, hi]^2 (out-of-range values land in the edge cells,
// so the histogram total is always the pair count) plus an ordinary
// least-squares line through the pairs.
inline DensityScatter density_scatter(std::span<const EvalPair> pairs, int n_bins = 40,
                                      double lo = 0.0, double hi = 40.0) {
    if (pairs.size() < 2) throw DataError("density_scatter: need at least 2 pairs");
    if (n_bins < 1 || !(hi > lo)) throw ArgError("density_scatter: bad histogram spec");
    DensityScatter ds;
    ds.n_bins = n_bins;
    ds.lo = lo;
    ds.hi = hi;
    ds.counts.assign(static_cast<size_t>(n_bins) * n_bins, 0);

    const auto bin_of = [&](double v) {
        const double t = (v - lo) / (hi - lo) * n_bins;
        return std::clamp(static_cast<int>(t), 0, n_bins - 1);
    };
    double mean_ref = 0.0, mean_pred = 0.0;
    for (const EvalPair& p : pairs) {
        ++ds.at(bin_of(p.ref), bin_of(p.pred));
        mean_ref += p.ref;
        mean_pred += p.pred;
    }
    mean_ref /= static_cast<double>(pairs.size());
    mean_pred /= static_cast<double>(pairs.size());
    double cov = 0.0, var_ref = 0.0;
    for (const EvalPair& p : pairs) {
        cov += (p.ref - mean_ref) * (p.pred - mean_pred);
        var_ref += (p.ref - mean_ref) * (p.ref - mean_ref);
    }
    ds.slope = var_ref > 0.0 ? cov / var_ref : 0.0;
    ds.intercept = mean_pred - ds.slope * mean_ref;
    return ds;
}

}  // namespace canopyuq
