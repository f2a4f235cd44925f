#pragma once

// Georeferenced raster containers, tile geometry, and streaming statistics.
// Conventions fixed here and relied on everywhere else:
//   - data is row-major, channel-last: index = ((row * width) + col) * channels + ch
//   - map origin is the lower-left corner of the grid, y grows northward,
//     so row 0 is the southernmost row (file readers convert on ingest)
//   - the nodata sentinel never participates in statistics or losses

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"

namespace canopyuq {

struct BBox {
    double min_x = 0.0;
    double min_y = 0.0;
    double max_x = 0.0;
    double max_y = 0.0;

    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
    double area() const { return width() * height(); }
    bool valid() const { return min_x < max_x && min_y < max_y; }

    bool intersects(const BBox& o) const {
        return min_x < o.max_x && o.min_x < max_x && min_y < o.max_y && o.min_y < max_y;
    }

    BBox intersection(const BBox& o) const {
        return BBox{std::max(min_x, o.min_x), std::max(min_y, o.min_y),
                    std::min(max_x, o.max_x), std::min(max_y, o.max_y)};
    }

    bool contains(double x, double y) const {
        // Half-open: centers on the max edge belong to the neighbouring box,
        // which keeps adjacent zones a partition.
        return x >= min_x && x < max_x && y >= min_y && y < max_y;
    }
};

struct RasterGrid {
    double origin_x = 0.0;   // map x of the lower-left corner (m)
    double origin_y = 0.0;   // map y of the lower-left corner (m)
    double pixel_size = 1.0; // meters per pixel, uniform
    int width = 0;
    int height = 0;
    int channels = 1;
    float nodata = -9999.0f;
    std::string crs_tag;
    std::vector<float> data;

    static RasterGrid make(int width, int height, int channels, double origin_x = 0.0,
                           double origin_y = 0.0, double pixel_size = 1.0,
                           float nodata = -9999.0f, float fill = 0.0f) {
        if (width <= 0 || height <= 0 || channels < 1)
            throw ArgError("RasterGrid: width/height must be positive, channels >= 1");
        if (pixel_size <= 0.0) throw ArgError("RasterGrid: pixel_size must be positive");
        RasterGrid g;
        g.origin_x = origin_x;
        g.origin_y = origin_y;
        g.pixel_size = pixel_size;
        g.width = width;
        g.height = height;
        g.channels = channels;
        g.nodata = nodata;
        g.data.assign(static_cast<size_t>(width) * height * channels, fill);
        return g;
    }

    size_t index(int col, int row, int ch = 0) const {
        return (static_cast<size_t>(row) * width + col) * channels + ch;
    }
    float at(int col, int row, int ch = 0) const { return data[index(col, row, ch)]; }
    float& at(int col, int row, int ch = 0) { return data[index(col, row, ch)]; }

    bool is_nodata(float v) const {
        return std::isnan(nodata) ? std::isnan(v) : v == nodata;
    }

    bool same_geometry(const RasterGrid& o) const {
        return width == o.width && height == o.height && pixel_size == o.pixel_size &&
               origin_x == o.origin_x && origin_y == o.origin_y;
    }

    BBox bbox() const {
        return BBox{origin_x, origin_y, origin_x + width * pixel_size,
                    origin_y + height * pixel_size};
    }

    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    size_t value_count() const { return pixel_count() * channels; }
};

// Map-space extent of exactly one pixel; the boxes of all pixels tile the
// raster extent with no overlap.
inline BBox pixel_bbox(const RasterGrid& r, int col, int row) {
    if (col < 0 || col >= r.width || row < 0 || row >= r.height)
        throw ArgError("pixel_bbox: index (" + std::to_string(col) + "," +
                       std::to_string(row) + ") out of range");
    const double x0 = r.origin_x + col * r.pixel_size;
    const double y0 = r.origin_y + row * r.pixel_size;
    return BBox{x0, y0, x0 + r.pixel_size, y0 + r.pixel_size};
}

// Streaming per-channel count/mean/M2 with the Chan et al. pairwise merge
// rule, so partial statistics can be accumulated in parallel and reduced.
struct OnlineStats {
    std::vector<uint64_t> count;
    std::vector<double> mean;
    std::vector<double> m2;

    OnlineStats() = default;
    explicit OnlineStats(int channels)
        : count(channels, 0), mean(channels, 0.0), m2(channels, 0.0) {}

    int channels() const { return static_cast<int>(count.size()); }

    void add(int ch, std::span<const float> values) {
        if (values.empty()) return;
        // One-pass Welford over the batch, then a single merge.
        uint64_t n = 0;
        double bmean = 0.0, bm2 = 0.0;
        for (const float v : values) {
            ++n;
            const double delta = v - bmean;
            bmean += delta / static_cast<double>(n);
            bm2 += delta * (v - bmean);
        }
        merge_channel(ch, n, bmean, bm2);
    }

    void add_value(int ch, double v) {
        ++count[ch];
        const double delta = v - mean[ch];
        mean[ch] += delta / static_cast<double>(count[ch]);
        m2[ch] += delta * (v - mean[ch]);
    }

    void merge(const OnlineStats& o) {
        if (o.channels() != channels())
            throw ArgError("OnlineStats::merge: channel count mismatch");
        for (int ch = 0; ch < channels(); ++ch)
            merge_channel(ch, o.count[ch], o.mean[ch], o.m2[ch]);
    }

    // Population variance: the clamp bounds are insensitive to the 1/n vs
    // 1/(n-1) choice at dataset scale.
    double variance(int ch) const {
        return count[ch] > 0 ? m2[ch] / static_cast<double>(count[ch]) : 0.0;
    }
    double stddev(int ch) const { return std::sqrt(variance(ch)); }

private:
    void merge_channel(int ch, uint64_t n_b, double mean_b, double m2_b) {
        if (n_b == 0) return;
        const uint64_t n_a = count[ch];
        if (n_a == 0) {
            count[ch] = n_b;
            mean[ch] = mean_b;
            m2[ch] = m2_b;
            return;
        }
        const double na = static_cast<double>(n_a);
        const double nb = static_cast<double>(n_b);
        const double delta = mean_b - mean[ch];
        const double n = na + nb;
        mean[ch] += delta * nb / n;
        m2[ch] += m2_b + delta * delta * na * nb / n;
        count[ch] = n_a + n_b;
    }
};

// Pure-function forms of the update; the members above are the in-place
// workhorses.
inline OnlineStats stats_update(OnlineStats stats, int ch, std::span<const float> batch) {
    stats.add(ch, batch);
    return stats;
}

inline OnlineStats stats_merge(OnlineStats a, const OnlineStats& b) {
    a.merge(b);
    return a;
}

// Accumulate every valid pixel of a raster into per-channel statistics.
inline void stats_accumulate(OnlineStats& stats, const RasterGrid& r) {
    if (stats.channels() != r.channels)
        throw ArgError("stats_accumulate: channel count mismatch");
    for (size_t p = 0; p < r.pixel_count(); ++p) {
        for (int ch = 0; ch < r.channels; ++ch) {
            const float v = r.data[p * r.channels + ch];
            if (!r.is_nodata(v)) stats.add_value(ch, v);
        }
    }
}

// Clip each valid pixel to [mu - 3 sigma, mu + 3 sigma] per channel, then map
// to (x - mu) / sigma. Nodata pixels pass through untouched.
inline RasterGrid clamp_normalize(const RasterGrid& r, const OnlineStats& stats) {
    if (stats.channels() != r.channels)
        throw ArgError("clamp_normalize: stats have " + std::to_string(stats.channels()) +
                       " channels, raster has " + std::to_string(r.channels));
    std::vector<double> mu(r.channels), sigma(r.channels);
    for (int ch = 0; ch < r.channels; ++ch) {
        if (stats.count[ch] < 2)
            throw ArgError("clamp_normalize: channel " + std::to_string(ch) +
                           " has fewer than 2 samples");
        mu[ch] = stats.mean[ch];
        sigma[ch] = stats.stddev(ch);
        if (sigma[ch] <= 0.0)
            throw NumericError("clamp_normalize: channel " + std::to_string(ch) +
                               " has zero variance");
    }
    RasterGrid out = r;
    for (size_t p = 0; p < r.pixel_count(); ++p) {
        for (int ch = 0; ch < r.channels; ++ch) {
            const size_t i = p * r.channels + ch;
            const float v = r.data[i];
            if (r.is_nodata(v)) continue;
            const double lo = mu[ch] - 3.0 * sigma[ch];
            const double hi = mu[ch] + 3.0 * sigma[ch];
            const double clipped = std::min(hi, std::max(lo, static_cast<double>(v)));
            out.data[i] = static_cast<float>((clipped - mu[ch]) / sigma[ch]);
        }
    }
    return out;
}

}  // namespace canopyuq
