#pragma once

// Spatial tiling, k-fold spatial cross-validation with sub-folds, sliding
// window patch extraction over sparse targets, the patch record file format,
// and the synthetic scene generator used for desk-scale experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/grid.hpp"

namespace canopyuq {

struct TileGrid {
    int rows = 0;
    int cols = 0;
    std::vector<BBox> tiles;  // tile id = row-major index

    int count() const { return static_cast<int>(tiles.size()); }
};

inline TileGrid make_tiles(const BBox& extent, int rows, int cols) {
    if (!extent.valid()) throw ArgError("make_tiles: degenerate extent");
    if (rows < 1 || cols < 1) throw ArgError("make_tiles: rows and cols must be >= 1");
    TileGrid grid;
    grid.rows = rows;
    grid.cols = cols;
    grid.tiles.reserve(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            // Edges from exact fractions of the extent, so tiles partition it.
            const double x0 = extent.min_x + extent.width() * c / cols;
            const double x1 = extent.min_x + extent.width() * (c + 1) / cols;
            const double y0 = extent.min_y + extent.height() * r / rows;
            const double y1 = extent.min_y + extent.height() * (r + 1) / rows;
            grid.tiles.push_back(BBox{x0, y0, x1, y1});
        }
    }
    return grid;
}

struct SubFold {
    std::vector<int> train_tiles;
    std::vector<int> val_tiles;
};

struct FoldSpec {
    int fold_id = 0;
    std::vector<int> test_tiles;
    std::vector<int> train_tiles;
    std::vector<SubFold> sub_folds;
};

// k spatial folds: every tile lands in exactly one test set; within each fold
// the training tiles split into `n_sub` (train, validation) partitions whose
// validation sets are pairwise disjoint.
inline std::vector<FoldSpec> spatial_folds(int n_tiles, int k, uint64_t seed,
                                           int n_sub = 5) {
    if (k < 1 || k > n_tiles)
        throw ArgError("spatial_folds: need 1 <= k <= tile count, got k=" +
                       std::to_string(k) + " for " + std::to_string(n_tiles) + " tiles");
    if (n_sub < 1) throw ArgError("spatial_folds: n_sub must be >= 1");

    std::vector<int> order(n_tiles);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());

    std::vector<FoldSpec> folds(k);
    for (int f = 0; f < k; ++f) {
        FoldSpec& fold = folds[f];
        fold.fold_id = f;
        // Contiguous slice of the shuffled order; remainders spread over the
        // first folds.
        const int base = n_tiles / k, extra = n_tiles % k;
        const int begin = f * base + std::min(f, extra);
        const int size = base + (f < extra ? 1 : 0);
        fold.test_tiles.assign(order.begin() + begin, order.begin() + begin + size);
        for (int t : order)
            if (std::find(fold.test_tiles.begin(), fold.test_tiles.end(), t) ==
                fold.test_tiles.end())
                fold.train_tiles.push_back(t);
        std::sort(fold.test_tiles.begin(), fold.test_tiles.end());
        std::sort(fold.train_tiles.begin(), fold.train_tiles.end());

        std::vector<int> train_order = fold.train_tiles;
        Rng sub_rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(f) + 1);
        sub_rng.shuffle(train_order.begin(), train_order.end());
        const int n_train = static_cast<int>(train_order.size());
        const int sub_count = std::min(n_sub, n_train);
        fold.sub_folds.resize(sub_count);
        for (int s = 0; s < sub_count; ++s) {
            const int sbase = n_train / sub_count, sextra = n_train % sub_count;
            const int sbegin = s * sbase + std::min(s, sextra);
            const int ssize = sbase + (s < sextra ? 1 : 0);
            SubFold& sub = fold.sub_folds[s];
            sub.val_tiles.assign(train_order.begin() + sbegin,
                                 train_order.begin() + sbegin + ssize);
            for (int t : train_order)
                if (std::find(sub.val_tiles.begin(), sub.val_tiles.end(), t) ==
                    sub.val_tiles.end())
                    sub.train_tiles.push_back(t);
            std::sort(sub.val_tiles.begin(), sub.val_tiles.end());
            std::sort(sub.train_tiles.begin(), sub.train_tiles.end());
        }
    }
    return folds;
}

// One training unit: a covariate patch, the sparse target patch, and the
// validity mask marking where the target carries an observation.
struct PatchRecord {
    int w = 0;
    int c = 0;
    std::vector<float> covariates;  // w*w*c, channel-last
    std::vector<float> target;      // w*w
    std::vector<uint8_t> valid;     // w*w, 1 where target observed
    uint32_t tile_id = 0;
    uint16_t year = 0;
    uint32_t col0 = 0;
    uint32_t row0 = 0;

    int64_t valid_count() const {
        return std::count(valid.begin(), valid.end(), uint8_t{1});
    }

    bool operator==(const PatchRecord& o) const {
        return w == o.w && c == o.c && tile_id == o.tile_id && year == o.year &&
               col0 == o.col0 && row0 == o.row0 && covariates == o.covariates &&
               target == o.target && valid == o.valid;
    }
};

struct PixelRect {
    int col0 = 0, row0 = 0, cols = 0, rows = 0;
};

// Pixel-space rectangle of raster cells whose full extent lies inside `box`.
inline PixelRect raster_rect(const RasterGrid& r, const BBox& box) {
    const double eps = 1e-7 * r.pixel_size;
    const int c0 = static_cast<int>(std::ceil((box.min_x - r.origin_x) / r.pixel_size - eps));
    const int r0 = static_cast<int>(std::ceil((box.min_y - r.origin_y) / r.pixel_size - eps));
    const int c1 = static_cast<int>(std::floor((box.max_x - r.origin_x) / r.pixel_size + eps));
    const int r1 = static_cast<int>(std::floor((box.max_y - r.origin_y) / r.pixel_size + eps));
    PixelRect rect;
    rect.col0 = std::max(0, c0);
    rect.row0 = std::max(0, r0);
    rect.cols = std::min(r.width, c1) - rect.col0;
    rect.rows = std::min(r.height, r1) - rect.row0;
    return rect;
}

// Sliding-window extraction over a pixel region. Stride = round(w*(1-overlap));
// windows lie fully inside the region; windows with fewer valid target pixels
// than ceil(min_density * w^2) are dropped.
inline std::vector<PatchRecord> extract_patches(const RasterGrid& covariates,
                                                const RasterGrid& target,
                                                const PixelRect& region, int w = 64,
                                                double overlap = 0.25,
                                                double min_density = 0.01,
                                                uint32_t tile_id = 0, uint16_t year = 0) {
    if (!covariates.same_geometry(target))
        throw DataError("extract_patches: covariates and target grids differ");
    if (w < 1) throw ArgError("extract_patches: window must be positive");
    if (overlap < 0.0 || overlap >= 1.0)
        throw ArgError("extract_patches: overlap must be in [0, 1)");

    const int stride = std::max(1, static_cast<int>(std::lround(w * (1.0 - overlap))));
    const int64_t min_valid =
        static_cast<int64_t>(std::ceil(min_density * static_cast<double>(w) * w));

    std::vector<PatchRecord> out;
    if (region.cols < w || region.rows < w) return out;
    for (int oy = 0; oy + w <= region.rows; oy += stride) {
        for (int ox = 0; ox + w <= region.cols; ox += stride) {
            PatchRecord rec;
            rec.w = w;
            rec.c = covariates.channels;
            rec.tile_id = tile_id;
            rec.year = year;
            rec.col0 = static_cast<uint32_t>(region.col0 + ox);
            rec.row0 = static_cast<uint32_t>(region.row0 + oy);
            rec.covariates.resize(static_cast<size_t>(w) * w * covariates.channels);
            rec.target.resize(static_cast<size_t>(w) * w);
            rec.valid.resize(static_cast<size_t>(w) * w);
            int64_t n_valid = 0;
            for (int y = 0; y < w; ++y) {
                const int row = region.row0 + oy + y;
                for (int x = 0; x < w; ++x) {
                    const int col = region.col0 + ox + x;
                    const size_t pi = static_cast<size_t>(y) * w + x;
                    std::copy_n(&covariates.data[covariates.index(col, row)],
                                covariates.channels,
                                &rec.covariates[pi * covariates.channels]);
                    const float t = target.at(col, row);
                    const bool ok = !target.is_nodata(t);
                    rec.target[pi] = t;
                    rec.valid[pi] = ok ? 1 : 0;
                    n_valid += ok;
                }
            }
            if (n_valid >= min_valid) out.push_back(std::move(rec));
        }
    }
    return out;
}

// Whole-raster overload.
inline std::vector<PatchRecord> extract_patches(const RasterGrid& covariates,
                                                const RasterGrid& target, int w = 64,
                                                double overlap = 0.25,
                                                double min_density = 0.01,
                                                uint32_t tile_id = 0, uint16_t year = 0) {
    return extract_patches(covariates, target,
                           PixelRect{0, 0, covariates.width, covariates.height}, w,
                           overlap, min_density, tile_id, year);
}

// ---------------------------------------------------------------------------
// Patch record files ("CUQR"): header (magic, version, w, c), then records.

class RecordWriter {
public:
    RecordWriter(const std::string& path, int w, int c)
        : os_(path, std::ios::binary | std::ios::trunc), writer_(os_), w_(w), c_(c) {
        if (!os_) throw DataError(path + ": cannot open for writing");
        writer_.magic("CUQR");
        writer_.u32(1);
        writer_.u32(static_cast<uint32_t>(w));
        writer_.u32(static_cast<uint32_t>(c));
    }

    void append(const PatchRecord& rec) {
        if (rec.w != w_ || rec.c != c_)
            throw DataError("RecordWriter: record shape does not match file header");
        writer_.u32(rec.tile_id);
        writer_.u16(rec.year);
        writer_.u32(rec.col0);
        writer_.u32(rec.row0);
        writer_.f32_array(rec.covariates.data(), rec.covariates.size());
        writer_.f32_array(rec.target.data(), rec.target.size());
        const size_t n_bits = static_cast<size_t>(w_) * w_;
        std::vector<uint8_t> packed((n_bits + 7) / 8, 0);
        for (size_t i = 0; i < n_bits; ++i)
            if (rec.valid[i]) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
        writer_.bytes(packed.data(), packed.size());
        ++count_;
    }

    size_t count() const { return count_; }

private:
    std::ofstream os_;
    ByteWriter writer_;
    int w_, c_;
    size_t count_ = 0;
};

class RecordReader {
public:
    explicit RecordReader(const std::string& path)
        : path_(path), is_(path, std::ios::binary), reader_(is_, path) {
        if (!is_) throw DataError(path + ": cannot open");
        reader_.expect_magic("CUQR", path);
        const uint32_t version = reader_.u32();
        if (version != 1) throw DataError(path + ": unsupported record file version");
        w_ = static_cast<int>(reader_.u32());
        c_ = static_cast<int>(reader_.u32());
        if (w_ < 1 || c_ < 1) throw DataError(path + ": degenerate record shape");
    }

    int w() const { return w_; }
    int c() const { return c_; }

    std::optional<PatchRecord> next() {
        if (reader_.at_eof()) return std::nullopt;
        PatchRecord rec;
        rec.w = w_;
        rec.c = c_;
        try {
            rec.tile_id = reader_.u32();
            rec.year = reader_.u16();
            rec.col0 = reader_.u32();
            rec.row0 = reader_.u32();
            rec.covariates.resize(static_cast<size_t>(w_) * w_ * c_);
            reader_.f32_array(rec.covariates.data(), rec.covariates.size());
            rec.target.resize(static_cast<size_t>(w_) * w_);
            reader_.f32_array(rec.target.data(), rec.target.size());
            const size_t n_bits = static_cast<size_t>(w_) * w_;
            std::vector<uint8_t> packed((n_bits + 7) / 8);
            reader_.bytes(packed.data(), packed.size());
            rec.valid.resize(n_bits);
            for (size_t i = 0; i < n_bits; ++i)
                rec.valid[i] = (packed[i / 8] >> (i % 8)) & 1u;
        } catch (const DataError&) {
            throw DataError(path_ + ": record " + std::to_string(index_) + " truncated");
        }
        ++index_;
        return rec;
    }

private:
    std::string path_;
    std::ifstream is_;
    ByteReader reader_;
    int w_ = 0, c_ = 0;
    size_t index_ = 0;
};

inline void write_records(const std::string& path, const std::vector<PatchRecord>& records,
                          int w = 64, int c = 1) {
    if (!records.empty()) {
        w = records.front().w;
        c = records.front().c;
    }
    RecordWriter writer(path, w, c);
    for (const PatchRecord& rec : records) writer.append(rec);
}

inline std::vector<PatchRecord> read_records(const std::string& path) {
    RecordReader reader(path);
    std::vector<PatchRecord> out;
    while (auto rec = reader.next()) out.push_back(std::move(*rec));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scene generator.

struct SynthScene {
    RasterGrid covariates;    // 9 channels
    RasterGrid dense_truth;   // full height field, meters
    RasterGrid sparse_target; // heights sampled on tracks, nodata elsewhere
};

namespace detail {

// Smooth field: coarse unit-normal lattice, bilinear-upsampled, then rescaled
// to zero mean / unit variance over the scene.
inline std::vector<double> smooth_field(Rng& rng, int size, int cell) {
    const int coarse = size / cell + 2;
    std::vector<double> lattice(static_cast<size_t>(coarse) * coarse);
    for (auto& v : lattice) v = rng.normal();
    std::vector<double> field(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const int iy = static_cast<int>(fy);
        const double ty = fy - iy;
        for (int x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const int ix = static_cast<int>(fx);
            const double tx = fx - ix;
            const auto at = [&](int cy, int cx) {
                return lattice[static_cast<size_t>(cy) * coarse + cx];
            };
            field[static_cast<size_t>(y) * size + x] =
                (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
                ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
        }
    }
    double mean = 0.0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(field.size());
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= static_cast<double>(field.size());
    const double inv_std = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
    for (double& v : field) v = (v - mean) * inv_std;
    return field;
}

}  // namespace detail

// Deterministic synthetic scene: a smooth, right-skewed height field in
// [0, 40] m; nine covariate channels that are distinct nonlinear responses to
// the height (grouped into three "seasons" with phase-shifted gains) plus
// per-channel noise and a nuisance field; and a sparse sampling of the truth
// on tracks 2 px apart along-track and 20 px apart across-track, with an
// `outlier_rate` fraction of samples replaced by uniform draws in [0, 40].
inline SynthScene synth_scene(uint64_t seed, int size, double outlier_rate) {
    if (size < 64) throw ArgError("synth_scene: size must be >= 64");
    if (outlier_rate < 0.0 || outlier_rate > 1.0)
        throw ArgError("synth_scene: outlier_rate must be in [0, 1]");

    Rng rng(seed);
    const auto latent_large = detail::smooth_field(rng, size, 48);
    const auto latent_mid = detail::smooth_field(rng, size, 12);
    const auto nuisance = detail::smooth_field(rng, size, 24);

    constexpr double kPixelSize = 30.0;
    constexpr int kChannels = 9;
    SynthScene scene;
    scene.dense_truth = RasterGrid::make(size, size, 1, 0.0, 0.0, kPixelSize);
    scene.covariates = RasterGrid::make(size, size, kChannels, 0.0, 0.0, kPixelSize);
    scene.sparse_target = RasterGrid::make(size, size, 1, 0.0, 0.0, kPixelSize);
    scene.dense_truth.crs_tag = scene.covariates.crs_tag = scene.sparse_target.crs_tag =
        "SYNTH-LOCAL";
    std::fill(scene.sparse_target.data.begin(), scene.sparse_target.data.end(),
              scene.sparse_target.nodata);

    const size_t npix = scene.dense_truth.pixel_count();
    // Height: squash the latent mix through a logistic, then skew low so tall
    // canopies are rare (mimics the long right tail of real height data).
    for (size_t p = 0; p < npix; ++p) {
        const double s = 0.7 * latent_large[p] + 0.3 * latent_mid[p];
        const double u = 1.0 / (1.0 + std::exp(-1.6 * s));
        scene.dense_truth.data[p] = static_cast<float>(40.0 * std::pow(u, 2.2));
    }

    // Channel responses: three season groups x three spectral shapes.
    const double season_gain[3] = {0.85, 1.0, 0.92};
    const double season_phase[3] = {0.0, 0.35, 0.7};
    const double noise_sigma[kChannels] = {0.03, 0.03, 0.04, 0.03, 0.03, 0.04,
                                           0.05, 0.05, 0.06};
    for (size_t p = 0; p < npix; ++p) {
        const double t = scene.dense_truth.data[p] / 40.0;
        const double eta = nuisance[p];
        for (int ch = 0; ch < kChannels; ++ch) {
            const int season = ch / 3;
            const int shape = ch % 3;
            const double g = season_gain[season];
            const double ph = season_phase[season];
            double v = 0.0;
            switch (shape) {
                case 0:  // visible-like: darkens with canopy
                    v = g * (0.9 - 0.7 * t) + 0.05 * std::cos(2.0 * M_PI * (t + ph));
                    break;
                case 1:  // NIR-like: saturating rise
                    v = g * (0.15 + 0.8 * std::pow(t, 0.65)) + 0.04 * eta;
                    break;
                default:  // SAR-like: exponential saturation plus nuisance
                    v = g * (1.0 - std::exp(-3.0 * (t + 0.02))) + 0.08 * eta +
                        0.03 * std::sin(2.0 * M_PI * (t * 0.5 + ph));
                    break;
            }
            scene.covariates.data[p * kChannels + ch] =
                static_cast<float>(v + noise_sigma[ch] * rng.normal());
        }
    }

    // Sparse tracks: across-track spacing 20 px (600 m), along-track 2 px
    // (60 m) at the 30 m grid; one random global offset per scene.
    constexpr int kAcross = 20;
    constexpr int kAlong = 2;
    const int col_offset = static_cast<int>(rng.bounded(kAcross));
    const int row_offset = static_cast<int>(rng.bounded(kAlong));
    for (int col = col_offset; col < size; col += kAcross) {
        for (int row = row_offset; row < size; row += kAlong) {
            float v = scene.dense_truth.at(col, row);
            if (outlier_rate > 0.0 && rng.uniform() < outlier_rate)
                v = static_cast<float>(rng.uniform(0.0, 40.0));
            scene.sparse_target.at(col, row) = v;
        }
    }
    return scene;
}

}  // namespace canopyuq
