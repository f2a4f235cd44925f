#pragma once

// Harmonization of high-resolution reference rasters to a coarse sensor grid:
// intersect coarse tiles with high-resolution tiles through a one-to-many
// table, then reduce the high-resolution pixels inside each coarse pixel
// footprint with the 98th percentile (the coarse sensor's energy-percentile
// measurement proxy).
//
// Pixel membership is decided by pixel center; the percentile uses linear
// interpolation between order statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/grid.hpp"

namespace canopyuq {

struct IntersectionEntry {
    int hires_id = 0;
    BBox overlap;
};

// coarse tile id -> intersecting high-resolution tiles with positive-area
// overlaps.
using IntersectionTable = std::vector<std::vector<IntersectionEntry>>;

// Grid-bucket spatial index over the hires tiles keeps this well under the
// O(n*m) of the all-pairs scan; the brute-force version survives in tests as
// the oracle.
inline IntersectionTable build_intersection_table(std::span<const BBox> coarse_tiles,
                                                  std::span<const BBox> hires_tiles) {
    IntersectionTable table(coarse_tiles.size());
    if (coarse_tiles.empty() || hires_tiles.empty()) return table;

    BBox domain = hires_tiles[0];
    double mean_w = 0.0, mean_h = 0.0;
    for (const BBox& t : hires_tiles) {
        domain.min_x = std::min(domain.min_x, t.min_x);
        domain.min_y = std::min(domain.min_y, t.min_y);
        domain.max_x = std::max(domain.max_x, t.max_x);
        domain.max_y = std::max(domain.max_y, t.max_y);
        mean_w += t.width();
        mean_h += t.height();
    }
    mean_w /= static_cast<double>(hires_tiles.size());
    mean_h /= static_cast<double>(hires_tiles.size());

    const int nx = std::max(1, static_cast<int>(domain.width() / std::max(mean_w, 1e-9)));
    const int ny = std::max(1, static_cast<int>(domain.height() / std::max(mean_h, 1e-9)));
    const double cell_w = domain.width() / nx;
    const double cell_h = domain.height() / ny;
    const auto cell_range = [&](double lo, double hi, double origin, double cell, int n) {
        int c0 = static_cast<int>((lo - origin) / cell);
        int c1 = static_cast<int>((hi - origin) / cell);
        return std::pair<int, int>{std::clamp(c0, 0, n - 1), std::clamp(c1, 0, n - 1)};
    };

    std::vector<std::vector<int>> buckets(static_cast<size_t>(nx) * ny);
    for (size_t i = 0; i < hires_tiles.size(); ++i) {
        const auto [cx0, cx1] = cell_range(hires_tiles[i].min_x, hires_tiles[i].max_x,
                                           domain.min_x, cell_w, nx);
        const auto [cy0, cy1] = cell_range(hires_tiles[i].min_y, hires_tiles[i].max_y,
                                           domain.min_y, cell_h, ny);
        for (int cy = cy0; cy <= cy1; ++cy)
            for (int cx = cx0; cx <= cx1; ++cx)
                buckets[static_cast<size_t>(cy) * nx + cx].push_back(static_cast<int>(i));
    }

    std::vector<int> seen(hires_tiles.size(), -1);
    for (size_t ci = 0; ci < coarse_tiles.size(); ++ci) {
        const BBox& zone = coarse_tiles[ci];
        const auto [cx0, cx1] = cell_range(zone.min_x, zone.max_x, domain.min_x, cell_w, nx);
        const auto [cy0, cy1] = cell_range(zone.min_y, zone.max_y, domain.min_y, cell_h, ny);
        for (int cy = cy0; cy <= cy1; ++cy) {
            for (int cx = cx0; cx <= cx1; ++cx) {
                for (int hi : buckets[static_cast<size_t>(cy) * nx + cx]) {
                    if (seen[hi] == static_cast<int>(ci)) continue;
                    seen[hi] = static_cast<int>(ci);
                    if (zone.intersects(hires_tiles[hi]))
                        table[ci].push_back({hi, zone.intersection(hires_tiles[hi])});
                }
            }
        }
        std::sort(table[ci].begin(), table[ci].end(),
                  [](const IntersectionEntry& a, const IntersectionEntry& b) {
                      return a.hires_id < b.hires_id;
                  });
    }
    return table;
}

// Linear-interpolation percentile of sorted values: rank q*(n-1), 0-based.
inline double interpolated_percentile(std::vector<double>& values, double q) {
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const size_t i = static_cast<size_t>(rank);
    const double frac = rank - static_cast<double>(i);
    if (i + 1 >= values.size()) return values.back();
    return values[i] + frac * (values[i + 1] - values[i]);
}

// 98th percentile (by default) of every valid hires pixel whose center lies
// inside the zone; empty zones yield nullopt.
inline std::optional<double> zonal_percentile(const BBox& zone, const RasterGrid& hires,
                                              double q = 0.98) {
    const double ps = hires.pixel_size;
    // Candidate pixel index range from the zone bounds, then exact center test.
    const int c0 = std::max(0, static_cast<int>(std::floor((zone.min_x - hires.origin_x) / ps - 1)));
    const int c1 = std::min(hires.width - 1,
                            static_cast<int>(std::ceil((zone.max_x - hires.origin_x) / ps + 1)));
    const int r0 = std::max(0, static_cast<int>(std::floor((zone.min_y - hires.origin_y) / ps - 1)));
    const int r1 = std::min(hires.height - 1,
                            static_cast<int>(std::ceil((zone.max_y - hires.origin_y) / ps + 1)));
    std::vector<double> values;
    for (int row = r0; row <= r1; ++row) {
        const double cy = hires.origin_y + (row + 0.5) * ps;
        for (int col = c0; col <= c1; ++col) {
            const double cx = hires.origin_x + (col + 0.5) * ps;
            if (!zone.contains(cx, cy)) continue;
            const float v = hires.at(col, row);
            if (!hires.is_nodata(v)) values.push_back(v);
        }
    }
    if (values.empty()) return std::nullopt;
    return interpolated_percentile(values, q);
}

inline std::optional<double> zonal_p98(const BBox& zone, const RasterGrid& hires) {
    return zonal_percentile(zone, hires, 0.98);
}

// For each coarse pixel, the q-percentile over the union of valid hires
// pixels from every intersecting tile. Overlapping tiles are deduplicated by
// pixel center with last-read-wins semantics (a warning is printed once).
inline RasterGrid harmonize(const RasterGrid& coarse_geometry,
                            const std::vector<RasterGrid>& hires_tiles, double q = 0.98) {
    if (hires_tiles.empty()) throw DataError("harmonize: no high-resolution tiles");
    std::vector<BBox> coarse_boxes, hires_boxes;
    coarse_boxes.reserve(coarse_geometry.pixel_count());
    for (int row = 0; row < coarse_geometry.height; ++row)
        for (int col = 0; col < coarse_geometry.width; ++col)
            coarse_boxes.push_back(pixel_bbox(coarse_geometry, col, row));
    hires_boxes.reserve(hires_tiles.size());
    for (const RasterGrid& t : hires_tiles) {
        if (t.channels != 1) throw DataError("harmonize: hires tiles must be single-channel");
        hires_boxes.push_back(t.bbox());
    }
    const IntersectionTable table = build_intersection_table(coarse_boxes, hires_boxes);

    RasterGrid out = RasterGrid::make(coarse_geometry.width, coarse_geometry.height, 1,
                                      coarse_geometry.origin_x, coarse_geometry.origin_y,
                                      coarse_geometry.pixel_size, coarse_geometry.nodata);
    out.crs_tag = coarse_geometry.crs_tag;

    bool warned_overlap = false;
    std::vector<double> values;
    std::unordered_map<uint64_t, double> dedup;
    for (size_t ci = 0; ci < coarse_boxes.size(); ++ci) {
        const auto& entries = table[ci];
        float result = out.nodata;
        if (entries.size() == 1) {
            const auto v = zonal_percentile(coarse_boxes[ci], hires_tiles[entries[0].hires_id], q);
            if (v) result = static_cast<float>(*v);
        } else if (!entries.empty()) {
            // Multiple tiles may double-cover a location; key by quantized
            // center so the last-listed tile wins.
            dedup.clear();
            const BBox& zone = coarse_boxes[ci];
            for (const IntersectionEntry& entry : entries) {
                const RasterGrid& tile = hires_tiles[entry.hires_id];
                const double ps = tile.pixel_size;
                const int c0 = std::max(
                    0, static_cast<int>(std::floor((zone.min_x - tile.origin_x) / ps - 1)));
                const int c1 = std::min(tile.width - 1, static_cast<int>(std::ceil(
                                                            (zone.max_x - tile.origin_x) / ps + 1)));
                const int r0 = std::max(
                    0, static_cast<int>(std::floor((zone.min_y - tile.origin_y) / ps - 1)));
                const int r1 = std::min(tile.height - 1, static_cast<int>(std::ceil(
                                                             (zone.max_y - tile.origin_y) / ps + 1)));
                for (int row = r0; row <= r1; ++row) {
                    const double cy = tile.origin_y + (row + 0.5) * ps;
                    for (int col = c0; col <= c1; ++col) {
                        const double cx = tile.origin_x + (col + 0.5) * ps;
                        if (!zone.contains(cx, cy)) continue;
                        const float v = tile.at(col, row);
                        if (tile.is_nodata(v)) continue;
                        const uint64_t kx =
                            static_cast<uint64_t>(static_cast<int64_t>(std::llround(cx / (ps * 0.5))));
                        const uint64_t ky =
                            static_cast<uint64_t>(static_cast<int64_t>(std::llround(cy / (ps * 0.5))));
                        const uint64_t key = (kx << 32) ^ (ky & 0xffffffffULL);
                        auto [it, inserted] = dedup.insert_or_assign(key, static_cast<double>(v));
                        if (!inserted && !warned_overlap) {
                            std::cerr << "harmonize: overlapping hires tiles detected; "
                                         "last-read value wins\n";
                            warned_overlap = true;
                        }
                    }
                }
            }
            if (!dedup.empty()) {
                values.clear();
                values.reserve(dedup.size());
                for (const auto& [key, v] : dedup) values.push_back(v);
                result = static_cast<float>(interpolated_percentile(values, q));
            }
        }
        out.data[ci] = result;
    }
    return out;
}

}  // namespace canopyuq
