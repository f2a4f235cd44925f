#pragma once

// Kernel density estimation of the target-height distribution and the
// inverse-density weighting used by the training loss: rare heights get
// weights above 1, frequent heights below 1, with clipping so near-empty
// height ranges cannot blow the loss up.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/dataset.hpp"

namespace canopyuq {

// Uniform random sample of valid target values across records; without
// replacement when the population is at least n, with replacement otherwise.
inline std::vector<float> sample_targets(const std::vector<PatchRecord>& records,
                                         size_t n, uint64_t seed) {
    std::vector<float> population;
    for (const PatchRecord& rec : records) {
        for (size_t i = 0; i < rec.target.size(); ++i)
            if (rec.valid[i]) population.push_back(rec.target[i]);
    }
    if (population.empty()) throw DataError("sample_targets: no valid target pixels");

    Rng rng(seed);
    std::vector<float> sample;
    sample.reserve(n);
    if (population.size() >= n) {
        // Partial Fisher-Yates gives the first n of a random permutation.
        std::vector<uint32_t> idx(population.size());
        std::iota(idx.begin(), idx.end(), 0u);
        for (size_t i = 0; i < n; ++i) {
            const size_t j = i + rng.bounded(population.size() - i);
            std::swap(idx[i], idx[j]);
            sample.push_back(population[idx[i]]);
        }
    } else {
        for (size_t i = 0; i < n; ++i)
            sample.push_back(population[rng.bounded(population.size())]);
    }
    return sample;
}

inline double silverman_bandwidth(const std::vector<float>& values) {
    if (values.size() < 2) return 1.0;
    double mean = 0.0;
    for (float v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (float v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size() - 1);
    const double sd = std::sqrt(std::max(var, 0.0));

    std::vector<float> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    const auto quantile = [&](double q) {
        const double rank = q * static_cast<double>(sorted.size() - 1);
        const size_t i = static_cast<size_t>(rank);
        const double frac = rank - static_cast<double>(i);
        return i + 1 < sorted.size() ? sorted[i] + frac * (sorted[i + 1] - sorted[i])
                                     : sorted[i];
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    double spread = sd;
    if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
    if (spread <= 0.0) spread = sd > 0.0 ? sd : 1.0;
    return 0.9 * spread * std::pow(static_cast<double>(values.size()), -0.2);
}

// Exact Gaussian KDE: density(z) = (1/(M h)) sum K((z - z_m)/h).
class KdeDensity {
public:
    KdeDensity(std::vector<float> samples, double bandwidth)
        : samples_(std::move(samples)), h_(bandwidth) {
        if (samples_.empty()) throw ArgError("KdeDensity: no samples");
        if (h_ <= 0.0) throw ArgError("KdeDensity: bandwidth must be positive");
    }

    double operator()(double z) const {
        const double inv_h = 1.0 / h_;
        const double norm = inv_h / (std::sqrt(2.0 * M_PI) * static_cast<double>(samples_.size()));
        double sum = 0.0;
        for (float s : samples_) {
            const double u = (z - s) * inv_h;
            sum += std::exp(-0.5 * u * u);
        }
        return norm * sum;
    }

    double bandwidth() const { return h_; }
    size_t sample_count() const { return samples_.size(); }

private:
    std::vector<float> samples_;
    double h_;
};

inline KdeDensity fit_kde(std::vector<float> values, double bandwidth) {
    return KdeDensity(std::move(values), bandwidth);
}

// Inverse-KDE weight with clipping and sample-mean-one normalization,
// evaluated through a precomputed lookup table so weight queries inside the
// training loop are O(1).
class WeightFunction {
public:
    static constexpr int kDefaultBins = 1024;

    // `bandwidth <= 0` selects Silverman's rule.
    static WeightFunction fit(const std::vector<float>& values, double bandwidth = 0.0,
                              double clip_lo = 0.1, double clip_hi = 10.0,
                              double range_lo = 0.0, double range_hi = 40.0,
                              int bins = kDefaultBins) {
        if (values.empty()) throw DataError("WeightFunction::fit: no samples");
        if (!(clip_lo > 0.0) || !(clip_hi >= clip_lo))
            throw ArgError("WeightFunction::fit: need 0 < clip_lo <= clip_hi");
        if (!(range_hi > range_lo)) throw ArgError("WeightFunction::fit: bad range");
        if (bins < 2) throw ArgError("WeightFunction::fit: bins must be >= 2");

        WeightFunction wf;
        wf.lo_ = range_lo;
        wf.hi_ = range_hi;
        wf.h_ = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(values);
        wf.clip_lo_ = clip_lo;
        wf.clip_hi_ = clip_hi;

        // Density at bin centers. For large samples, bin the data first; the
        // sub-bin placement error is far below the kernel bandwidth.
        const double step = (range_hi - range_lo) / (bins - 1);
        std::vector<double> density(bins, 0.0);
        if (values.size() > 100000) {
            std::vector<double> hist(bins, 0.0);
            for (float v : values) {
                double pos = (static_cast<double>(v) - range_lo) / step;
                pos = std::min(std::max(pos, 0.0), static_cast<double>(bins - 1));
                hist[static_cast<size_t>(std::lround(pos))] += 1.0;
            }
            const double norm =
                1.0 / (wf.h_ * std::sqrt(2.0 * M_PI) * static_cast<double>(values.size()));
            // Kernel support: beyond ~8h the Gaussian contributes nothing.
            const int reach = static_cast<int>(std::ceil(8.0 * wf.h_ / step)) + 1;
            for (int i = 0; i < bins; ++i) {
                double sum = 0.0;
                const int j0 = std::max(0, i - reach), j1 = std::min(bins - 1, i + reach);
                for (int j = j0; j <= j1; ++j) {
                    const double u = (i - j) * step / wf.h_;
                    sum += hist[j] * std::exp(-0.5 * u * u);
                }
                density[i] = norm * sum;
            }
        } else {
            const KdeDensity kde(values, wf.h_);
            for (int i = 0; i < bins; ++i) density[i] = kde(range_lo + i * step);
        }

        // Clipped raw weights per bin, then normalize so the mean weight over
        // the fitting sample (as evaluated through this table) is exactly 1.
        std::vector<float> raw(bins);
        for (int i = 0; i < bins; ++i) {
            const double d = density[i];
            const double inv = d > 0.0 ? 1.0 / d : clip_hi;
            raw[i] = static_cast<float>(std::min(clip_hi, std::max(clip_lo, inv)));
        }
        wf.table_ = std::move(raw);
        double mean_raw = 0.0;
        for (float v : values) mean_raw += wf.interpolate(v);
        mean_raw /= static_cast<double>(values.size());
        if (!(mean_raw > 0.0))
            throw NumericError("WeightFunction::fit: degenerate weight normalization");
        wf.norm_ = mean_raw;
        return wf;
    }

    // Clipped, pre-normalization weight.
    double raw_weight(double z) const { return interpolate(z); }

    // Final weight: raw / normalization; mean over the fitting sample is 1.
    double weight(double z) const { return interpolate(z) / norm_; }
    double operator()(double z) const { return weight(z); }

    double normalization() const { return norm_; }
    double bandwidth() const { return h_; }
    double clip_lo() const { return clip_lo_; }
    double clip_hi() const { return clip_hi_; }
    double range_lo() const { return lo_; }
    double range_hi() const { return hi_; }
    int bins() const { return static_cast<int>(table_.size()); }

    // "CUQW": magic, bin count, range, float32 normalized weights.
    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError(path + ": cannot open for writing");
        ByteWriter w(os);
        w.magic("CUQW");
        w.u32(static_cast<uint32_t>(table_.size()));
        w.f64(lo_);
        w.f64(hi_);
        for (float v : table_) w.f32(static_cast<float>(v / norm_));
    }

    static WeightFunction load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError(path + ": cannot open");
        ByteReader r(is, path);
        r.expect_magic("CUQW", path);
        const uint32_t bins = r.u32();
        if (bins < 2) throw DataError(path + ": degenerate weight table");
        WeightFunction wf;
        wf.lo_ = r.f64();
        wf.hi_ = r.f64();
        if (!(wf.hi_ > wf.lo_)) throw DataError(path + ": bad weight table range");
        wf.table_.resize(bins);
        r.f32_array(wf.table_.data(), bins);
        wf.norm_ = 1.0;  // stored weights are already normalized
        return wf;
    }

private:
    double interpolate(double z) const {
        const double step = (hi_ - lo_) / (bins() - 1);
        double pos = (std::min(std::max(z, lo_), hi_) - lo_) / step;
        const int i = std::min(static_cast<int>(pos), bins() - 2);
        const double frac = pos - i;
        return (1.0 - frac) * table_[i] + frac * table_[i + 1];
    }

    double lo_ = 0.0, hi_ = 40.0;
    double h_ = 1.0;
    double clip_lo_ = 0.1, clip_hi_ = 10.0;
    double norm_ = 1.0;
    std::vector<float> table_;
};

}  // namespace canopyuq
