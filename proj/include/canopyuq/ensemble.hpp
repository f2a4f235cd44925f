#pragma once

// Mixture-of-Laplace ensemble aggregation with the aleatoric/epistemic
// variance split, and tiled full-map inference with overlap blending.
//
// Each ensemble member predicts one Laplace (mu_e, b_e) per pixel. With
// mixing probabilities pi_e the mixture moments are
//   mean      = sum_e pi_e mu_e
//   aleatoric = sum_e pi_e 2 b_e^2
//   epistemic = sum_e pi_e mu_e^2 - mean^2
//   total     = aleatoric + epistemic
// Equal mixing (pi_e = 1/N_e) is the default.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/grid.hpp"
#include "canopyuq/model.hpp"

namespace canopyuq {

struct MixtureMoments {
    double mean = 0.0;
    double aleatoric = 0.0;  // m^2
    double epistemic = 0.0;  // m^2
    double total = 0.0;      // m^2
};

namespace detail {

inline void check_pis(size_t n_members, std::span<const double> pis) {
    if (pis.empty()) return;
    if (pis.size() != n_members)
        throw ArgError("mixture: got " + std::to_string(pis.size()) +
                       " mixing probabilities for " + std::to_string(n_members) + " members");
    double sum = 0.0;
    for (double p : pis) {
        if (p < 0.0) throw ArgError("mixture: mixing probabilities must be >= 0");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ArgError("mixture: mixing probabilities must sum to 1");
}

}  // namespace detail

inline double mixture_mean(std::span<const double> mus, std::span<const double> pis = {}) {
    if (mus.empty()) throw ArgError("mixture_mean: no members");
    detail::check_pis(mus.size(), pis);
    double mean = 0.0;
    for (size_t e = 0; e < mus.size(); ++e)
        mean += (pis.empty() ? 1.0 / static_cast<double>(mus.size()) : pis[e]) * mus[e];
    return mean;
}

inline MixtureMoments mixture_variance(std::span<const double> mus,
                                       std::span<const double> bs,
                                       std::span<const double> pis = {}) {
    if (mus.empty() || mus.size() != bs.size())
        throw ArgError("mixture_variance: member count mismatch");
    detail::check_pis(mus.size(), pis);
    MixtureMoments m;
    for (size_t e = 0; e < mus.size(); ++e) {
        if (!(bs[e] > 0.0)) throw ArgError("mixture_variance: scales must be positive");
        const double pi = pis.empty() ? 1.0 / static_cast<double>(mus.size()) : pis[e];
        m.mean += pi * mus[e];
        m.aleatoric += pi * 2.0 * bs[e] * bs[e];
    }
    // Deviation form of sum pi mu^2 - mean^2: algebraically identical, and
    // exactly zero when all members agree (the raw-moment form leaves FMA
    // residue behind).
    for (size_t e = 0; e < mus.size(); ++e) {
        const double pi = pis.empty() ? 1.0 / static_cast<double>(mus.size()) : pis[e];
        const double d = mus[e] - m.mean;
        m.epistemic += pi * d * d;
    }
    m.total = m.aleatoric + m.epistemic;
    return m;
}

// Per-pixel ensemble maps; variances in m^2, geometry copied from the input.
struct EnsembleMaps {
    RasterGrid mean;
    RasterGrid aleatoric;
    RasterGrid epistemic;
    RasterGrid total;
};

namespace detail {

// Cosine (Hann) taper over the window with a small floor, so window centers
// dominate the blend but border pixels covered by a single window still get
// full weight after normalization.
inline std::vector<double> hann_taper(int window) {
    std::vector<double> t(window);
    for (int i = 0; i < window; ++i) {
        const double s = std::sin(M_PI * (i + 0.5) / window);
        t[i] = s * s + 1e-3;
    }
    return t;
}

inline std::vector<int> window_origins(int extent, int window, int stride) {
    std::vector<int> origins;
    for (int o = 0; o + window <= extent; o += stride) origins.push_back(o);
    if (origins.empty() || origins.back() + window < extent)
        origins.push_back(extent - window);  // edge-aligned final window
    return origins;
}

}  // namespace detail

// Sliding-window ensemble inference. Covariates must already be normalized
// with the training statistics. Pixels with any nodata covariate become
// nodata in every output; their window inputs are zero-imputed (the
// post-normalization mean) before the forward pass.
inline EnsembleMaps predict_map(std::vector<ResUNet<float>*> models,
                                const RasterGrid& covariates, int window = 64,
                                int stride = 48) {
    if (models.empty()) throw ArgError("predict_map: need at least one model");
    for (const auto* m : models)
        if (m->cfg.in_channels != covariates.channels)
            throw ArgError("predict_map: covariate channels (" +
                           std::to_string(covariates.channels) +
                           ") do not match model input channels (" +
                           std::to_string(m->cfg.in_channels) + ")");
    if (covariates.width < window || covariates.height < window)
        throw DataError("predict_map: raster smaller than the inference window");
    if (stride < 1 || stride > window) throw ArgError("predict_map: need 1 <= stride <= window");
    const int div = 1 << models.front()->cfg.depth;
    if (window % div)
        throw ArgError("predict_map: window must be divisible by 2^depth");

    const int w = covariates.width, h = covariates.height, c = covariates.channels;
    const auto cols = detail::window_origins(w, window, stride);
    const auto rows = detail::window_origins(h, window, stride);
    const auto taper = detail::hann_taper(window);

    const size_t npix = covariates.pixel_count();
    std::vector<uint8_t> pixel_ok(npix, 1);
    for (size_t p = 0; p < npix; ++p)
        for (int ch = 0; ch < c; ++ch)
            if (covariates.is_nodata(covariates.data[p * c + ch])) {
                pixel_ok[p] = 0;
                break;
            }

    const size_t n_members = models.size();
    // Accumulate weighted member (mu, b) in double; one Laplace per member per
    // pixel is preserved for the mixture step.
    std::vector<double> acc_mu(n_members * npix, 0.0);
    std::vector<double> acc_b(n_members * npix, 0.0);
    std::vector<double> acc_w(npix, 0.0);

    Tensor4<float> input(1, window, window, c);
    for (size_t e = 0; e < n_members; ++e) {
        for (const int oy : rows) {
            for (const int ox : cols) {
                for (int y = 0; y < window; ++y) {
                    const int row = oy + y;
                    for (int x = 0; x < window; ++x) {
                        const int col = ox + x;
                        const size_t p = static_cast<size_t>(row) * w + col;
                        for (int ch = 0; ch < c; ++ch)
                            input.at(0, y, x, ch) =
                                pixel_ok[p] ? covariates.data[p * c + ch] : 0.0f;
                    }
                }
                const auto field = models[e]->forward(input, /*training=*/false);
                for (int y = 0; y < window; ++y) {
                    const int row = oy + y;
                    for (int x = 0; x < window; ++x) {
                        const int col = ox + x;
                        const size_t p = static_cast<size_t>(row) * w + col;
                        const double wt = taper[y] * taper[x];
                        const size_t i = static_cast<size_t>(y) * window + x;
                        acc_mu[e * npix + p] += wt * field.mu.v[i];
                        acc_b[e * npix + p] += wt * field.b.v[i];
                        if (e == 0) acc_w[p] += wt;
                    }
                }
            }
        }
    }

    EnsembleMaps maps;
    const auto blank = [&](RasterGrid& g) {
        g = RasterGrid::make(w, h, 1, covariates.origin_x, covariates.origin_y,
                             covariates.pixel_size, covariates.nodata);
        g.crs_tag = covariates.crs_tag;
    };
    blank(maps.mean);
    blank(maps.aleatoric);
    blank(maps.epistemic);
    blank(maps.total);

    std::vector<double> mus(n_members), bs(n_members);
    for (size_t p = 0; p < npix; ++p) {
        if (!pixel_ok[p] || acc_w[p] <= 0.0) {
            maps.mean.data[p] = maps.mean.nodata;
            maps.aleatoric.data[p] = maps.aleatoric.nodata;
            maps.epistemic.data[p] = maps.epistemic.nodata;
            maps.total.data[p] = maps.total.nodata;
            continue;
        }
        for (size_t e = 0; e < n_members; ++e) {
            mus[e] = acc_mu[e * npix + p] / acc_w[p];
            bs[e] = acc_b[e * npix + p] / acc_w[p];
        }
        const MixtureMoments m = mixture_variance(mus, bs);
        maps.mean.data[p] = static_cast<float>(m.mean);
        maps.aleatoric.data[p] = static_cast<float>(m.aleatoric);
        maps.epistemic.data[p] = static_cast<float>(m.epistemic);
        maps.total.data[p] = static_cast<float>(m.total);
    }
    return maps;
}

}  // namespace canopyuq
