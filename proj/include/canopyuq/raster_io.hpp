#pragma once

// Raster file I/O.
//
// GeoTIFF support is a self-contained codec for the subset the pipeline
// produces and consumes: classic TIFF, float32 samples, uncompressed, chunky
// planar layout, striped or tiled, single or multi channel, with
// ModelPixelScale / ModelTiepoint / GeoAsciiParams / GDAL_NODATA tags. Both
// byte orders are accepted on read; files are written little-endian.
//
// TIFF stores row 0 at the top (north); RasterGrid keeps row 0 at the bottom
// (origin at the lower-left corner), so readers and writers flip row order.
//
// The raw fallback format ("CUQG") is a 64-byte header followed by the
// row-major float32 samples in RasterGrid memory order.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/grid.hpp"

namespace canopyuq {

namespace tiffdetail {

enum : uint16_t {
    kImageWidth = 256,
    kImageLength = 257,
    kBitsPerSample = 258,
    kCompression = 259,
    kPhotometric = 262,
    kStripOffsets = 273,
    kSamplesPerPixel = 277,
    kRowsPerStrip = 278,
    kStripByteCounts = 279,
    kPlanarConfig = 284,
    kTileWidth = 322,
    kTileLength = 323,
    kTileOffsets = 324,
    kTileByteCounts = 325,
    kSampleFormat = 339,
    kModelPixelScale = 33550,
    kModelTiepoint = 33922,
    kGeoKeyDirectory = 34735,
    kGeoAsciiParams = 34737,
    kGdalNodata = 42113,
};

enum : uint16_t {
    kTypeByte = 1,
    kTypeAscii = 2,
    kTypeShort = 3,
    kTypeLong = 4,
    kTypeFloat = 11,
    kTypeDouble = 12,
};

inline size_t type_size(uint16_t type) {
    switch (type) {
        case kTypeByte:
        case kTypeAscii:
            return 1;
        case kTypeShort:
            return 2;
        case kTypeLong:
        case kTypeFloat:
            return 4;
        case kTypeDouble:
            return 8;
        default:
            return 0;
    }
}

struct Entry {
    uint16_t type = 0;
    std::vector<double> nums;
    std::string ascii;

    double num(size_t i = 0) const { return nums.at(i); }
    uint32_t as_u32(size_t i = 0) const { return static_cast<uint32_t>(nums.at(i)); }
};

class Parser {
public:
    explicit Parser(std::vector<uint8_t> bytes, std::string path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {
        if (bytes_.size() < 8) throw DataError(path_ + ": not a TIFF (too short)");
        if (bytes_[0] == 'I' && bytes_[1] == 'I')
            big_endian_ = false;
        else if (bytes_[0] == 'M' && bytes_[1] == 'M')
            big_endian_ = true;
        else
            throw DataError(path_ + ": not a TIFF (bad byte-order mark)");
        const uint16_t magic = u16_at(2);
        if (magic == 43) throw DataError(path_ + ": BigTIFF is not supported");
        if (magic != 42) throw DataError(path_ + ": not a TIFF (bad magic)");
        const uint32_t ifd = u32_at(4);
        parse_ifd(ifd);
    }

    const Entry* find(uint16_t tag) const {
        const auto it = entries_.find(tag);
        return it == entries_.end() ? nullptr : &it->second;
    }

    const Entry& require(uint16_t tag, const char* name) const {
        const Entry* e = find(tag);
        if (!e) throw DataError(path_ + ": missing required TIFF tag " + name);
        return *e;
    }

    uint16_t u16_at(size_t off) const {
        check(off, 2);
        return big_endian_ ? static_cast<uint16_t>((bytes_[off] << 8) | bytes_[off + 1])
                           : static_cast<uint16_t>(bytes_[off] | (bytes_[off + 1] << 8));
    }

    uint32_t u32_at(size_t off) const {
        check(off, 4);
        uint32_t v = 0;
        if (big_endian_)
            for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[off + i];
        else
            for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[off + i];
        return v;
    }

    float f32_at(size_t off) const {
        const uint32_t bits = u32_at(off);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64_at(size_t off) const {
        check(off, 8);
        uint64_t v = 0;
        if (big_endian_)
            for (int i = 0; i < 8; ++i) v = (v << 8) | bytes_[off + i];
        else
            for (int i = 7; i >= 0; --i) v = (v << 8) | bytes_[off + i];
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }

    void read_f32_block(size_t off, float* dst, size_t count) const {
        check(off, count * 4);
        for (size_t i = 0; i < count; ++i) dst[i] = f32_at(off + i * 4);
    }

    const std::string& path() const { return path_; }

private:
    void check(size_t off, size_t len) const {
        if (off + len > bytes_.size()) throw DataError(path_ + ": truncated TIFF");
    }

    void parse_ifd(uint32_t ifd_off) {
        const uint16_t n = u16_at(ifd_off);
        for (uint16_t i = 0; i < n; ++i) {
            const size_t e = ifd_off + 2 + static_cast<size_t>(i) * 12;
            const uint16_t tag = u16_at(e);
            const uint16_t type = u16_at(e + 2);
            const uint32_t count = u32_at(e + 4);
            const size_t tsize = type_size(type);
            if (tsize == 0) continue;  // unknown type, skip
            const size_t total = tsize * count;
            const size_t value_off = total <= 4 ? e + 8 : u32_at(e + 8);
            Entry entry;
            entry.type = type;
            if (type == kTypeAscii) {
                check(value_off, count);
                entry.ascii.assign(reinterpret_cast<const char*>(bytes_.data()) + value_off,
                                   count);
                while (!entry.ascii.empty() && entry.ascii.back() == '\0')
                    entry.ascii.pop_back();
            } else {
                entry.nums.reserve(count);
                for (uint32_t k = 0; k < count; ++k) {
                    const size_t o = value_off + k * tsize;
                    switch (type) {
                        case kTypeByte:
                            check(o, 1);
                            entry.nums.push_back(bytes_[o]);
                            break;
                        case kTypeShort:
                            entry.nums.push_back(u16_at(o));
                            break;
                        case kTypeLong:
                            entry.nums.push_back(u32_at(o));
                            break;
                        case kTypeFloat:
                            entry.nums.push_back(f32_at(o));
                            break;
                        case kTypeDouble:
                            entry.nums.push_back(f64_at(o));
                            break;
                        default:
                            break;
                    }
                }
            }
            entries_[tag] = std::move(entry);
        }
        // Only the first IFD is read; multi-image files are out of scope.
    }

    std::vector<uint8_t> bytes_;
    std::string path_;
    bool big_endian_ = false;
    std::map<uint16_t, Entry> entries_;
};

// Writer-side IFD assembly.
struct OutEntry {
    uint16_t tag;
    uint16_t type;
    uint32_t count;
    std::vector<uint8_t> payload;  // raw little-endian payload bytes
};

inline void append_u16(std::vector<uint8_t>& v, uint16_t x) {
    v.push_back(static_cast<uint8_t>(x));
    v.push_back(static_cast<uint8_t>(x >> 8));
}
inline void append_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
inline void append_f64(std::vector<uint8_t>& v, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    for (int i = 0; i < 8; ++i) v.push_back(static_cast<uint8_t>(bits >> (8 * i)));
}

inline OutEntry shorts(uint16_t tag, std::vector<uint16_t> values) {
    OutEntry e{tag, kTypeShort, static_cast<uint32_t>(values.size()), {}};
    for (uint16_t v : values) append_u16(e.payload, v);
    return e;
}
inline OutEntry longs(uint16_t tag, std::vector<uint32_t> values) {
    OutEntry e{tag, kTypeLong, static_cast<uint32_t>(values.size()), {}};
    for (uint32_t v : values) append_u32(e.payload, v);
    return e;
}
inline OutEntry doubles(uint16_t tag, std::vector<double> values) {
    OutEntry e{tag, kTypeDouble, static_cast<uint32_t>(values.size()), {}};
    for (double v : values) append_f64(e.payload, v);
    return e;
}
inline OutEntry ascii(uint16_t tag, std::string s) {
    s.push_back('\0');
    OutEntry e{tag, kTypeAscii, static_cast<uint32_t>(s.size()), {}};
    e.payload.assign(s.begin(), s.end());
    return e;
}

}  // namespace tiffdetail

inline RasterGrid read_geotiff(const std::string& path) {
    using namespace tiffdetail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(path + ": cannot open");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
    Parser tiff(std::move(bytes), path);

    const uint32_t width = tiff.require(kImageWidth, "ImageWidth").as_u32();
    const uint32_t height = tiff.require(kImageLength, "ImageLength").as_u32();
    if (width == 0 || height == 0) throw DataError(path + ": empty image");

    uint32_t spp = 1;
    if (const Entry* e = tiff.find(kSamplesPerPixel)) spp = e->as_u32();
    if (spp < 1) throw DataError(path + ": SamplesPerPixel < 1");

    if (const Entry* e = tiff.find(kCompression); e && e->as_u32() != 1)
        throw DataError(path + ": compressed TIFF is not supported (compression " +
                        std::to_string(e->as_u32()) + ")");
    if (const Entry* e = tiff.find(kPlanarConfig); e && e->as_u32() != 1)
        throw DataError(path + ": planar (non-chunky) TIFF is not supported");

    const Entry& bits = tiff.require(kBitsPerSample, "BitsPerSample");
    for (size_t i = 0; i < bits.nums.size(); ++i)
        if (bits.as_u32(i) != 32)
            throw DataError(path + ": only 32-bit samples are supported");
    const Entry* fmt = tiff.find(kSampleFormat);
    if (!fmt) throw DataError(path + ": missing SampleFormat; only float32 is supported");
    for (size_t i = 0; i < fmt->nums.size(); ++i)
        if (fmt->as_u32(i) != 3)
            throw DataError(path + ": only IEEE float samples are supported");

    double pixel_size = 1.0;
    double ul_x = 0.0, ul_y = static_cast<double>(height);
    if (const Entry* scale = tiff.find(kModelPixelScale)) {
        if (scale->nums.size() < 2) throw DataError(path + ": malformed ModelPixelScale");
        const double sx = scale->num(0), sy = scale->num(1);
        if (!(sx > 0.0) || !(sy > 0.0))
            throw DataError(path + ": non-positive pixel scale");
        if (!nearly_equal(sx, sy, 1e-9))
            throw DataError(path + ": non-square pixels are not supported");
        pixel_size = sx;
        ul_y = height * pixel_size;
    }
    if (const Entry* tie = tiff.find(kModelTiepoint)) {
        if (tie->nums.size() < 6) throw DataError(path + ": malformed ModelTiepoint");
        // (i, j, k) raster point maps to (X, Y, Z); convert to the UL corner.
        ul_x = tie->num(3) - tie->num(0) * pixel_size;
        ul_y = tie->num(4) + tie->num(1) * pixel_size;
    }

    RasterGrid g = RasterGrid::make(static_cast<int>(width), static_cast<int>(height),
                                    static_cast<int>(spp), ul_x,
                                    ul_y - height * pixel_size, pixel_size);
    if (const Entry* nd = tiff.find(kGdalNodata))
        g.nodata = static_cast<float>(std::strtod(nd->ascii.c_str(), nullptr));
    else
        g.nodata = std::nanf("");
    if (const Entry* crs = tiff.find(kGeoAsciiParams)) {
        g.crs_tag = crs->ascii;
        while (!g.crs_tag.empty() && (g.crs_tag.back() == '|' || g.crs_tag.back() == ' '))
            g.crs_tag.pop_back();
    }

    // tiff_row counts from the top; our rows count from the bottom.
    const auto dest_row = [&](uint32_t tiff_row) { return height - 1 - tiff_row; };

    if (const Entry* tile_w_e = tiff.find(kTileWidth)) {
        const uint32_t tw = tile_w_e->as_u32();
        const uint32_t tl = tiff.require(kTileLength, "TileLength").as_u32();
        if (tw == 0 || tl == 0) throw DataError(path + ": zero tile dimensions");
        const Entry& offsets = tiff.require(kTileOffsets, "TileOffsets");
        const uint32_t across = (width + tw - 1) / tw;
        const uint32_t down = (height + tl - 1) / tl;
        if (offsets.nums.size() != static_cast<size_t>(across) * down)
            throw DataError(path + ": tile count mismatch");
        std::vector<float> tile(static_cast<size_t>(tw) * tl * spp);
        for (uint32_t tr = 0; tr < down; ++tr) {
            for (uint32_t tc = 0; tc < across; ++tc) {
                const size_t off = static_cast<size_t>(offsets.num(tr * across + tc));
                tiff.read_f32_block(off, tile.data(), tile.size());
                const uint32_t row_end = std::min(height, (tr + 1) * tl);
                const uint32_t col_end = std::min(width, (tc + 1) * tw);
                for (uint32_t r = tr * tl; r < row_end; ++r) {
                    const uint32_t tr_in = r - tr * tl;
                    for (uint32_t c = tc * tw; c < col_end; ++c) {
                        const uint32_t tc_in = c - tc * tw;
                        const float* src = &tile[(static_cast<size_t>(tr_in) * tw + tc_in) * spp];
                        float* dst = &g.data[g.index(static_cast<int>(c),
                                                     static_cast<int>(dest_row(r)))];
                        std::memcpy(dst, src, spp * sizeof(float));
                    }
                }
            }
        }
    } else {
        const Entry& offsets = tiff.require(kStripOffsets, "StripOffsets");
        uint32_t rows_per_strip = height;
        if (const Entry* rps = tiff.find(kRowsPerStrip)) rows_per_strip = rps->as_u32();
        if (rows_per_strip == 0) rows_per_strip = height;
        const uint32_t n_strips = (height + rows_per_strip - 1) / rows_per_strip;
        if (offsets.nums.size() != n_strips) throw DataError(path + ": strip count mismatch");
        std::vector<float> strip;
        for (uint32_t s = 0; s < n_strips; ++s) {
            const uint32_t row0 = s * rows_per_strip;
            const uint32_t row1 = std::min(height, row0 + rows_per_strip);
            strip.resize(static_cast<size_t>(row1 - row0) * width * spp);
            tiff.read_f32_block(static_cast<size_t>(offsets.num(s)), strip.data(),
                                strip.size());
            for (uint32_t r = row0; r < row1; ++r) {
                const float* src = &strip[static_cast<size_t>(r - row0) * width * spp];
                float* dst = &g.data[g.index(0, static_cast<int>(dest_row(r)))];
                std::memcpy(dst, src, static_cast<size_t>(width) * spp * sizeof(float));
            }
        }
    }
    return g;
}

inline void write_geotiff(const RasterGrid& g, const std::string& path, bool tiled = false,
                          int tile_size = 128) {
    using namespace tiffdetail;
    if (g.width <= 0 || g.height <= 0 || g.channels < 1)
        throw ArgError("write_geotiff: empty raster");

    const uint32_t width = static_cast<uint32_t>(g.width);
    const uint32_t height = static_cast<uint32_t>(g.height);
    const uint32_t spp = static_cast<uint32_t>(g.channels);

    // Pixel payload first (offset 8), then IFD, then spilled tag values.
    std::vector<uint8_t> data;
    std::vector<uint32_t> chunk_offsets, chunk_counts;

    const auto append_pixel = [&](int col, int row_from_top) {
        const int row = g.height - 1 - row_from_top;
        const float* src = &g.data[g.index(col, row)];
        for (uint32_t ch = 0; ch < spp; ++ch) {
            uint32_t bits;
            std::memcpy(&bits, &src[ch], 4);
            append_u32(data, bits);
        }
    };

    uint32_t rows_per_strip = 0, tw = 0, tl = 0;
    if (!tiled) {
        const uint64_t row_bytes = static_cast<uint64_t>(width) * spp * 4;
        rows_per_strip = static_cast<uint32_t>(std::max<uint64_t>(1, (1 << 16) / row_bytes));
        rows_per_strip = std::min(rows_per_strip, height);
        for (uint32_t row0 = 0; row0 < height; row0 += rows_per_strip) {
            const uint32_t row1 = std::min(height, row0 + rows_per_strip);
            chunk_offsets.push_back(static_cast<uint32_t>(8 + data.size()));
            const size_t before = data.size();
            for (uint32_t r = row0; r < row1; ++r)
                for (uint32_t c = 0; c < width; ++c) append_pixel(static_cast<int>(c),
                                                                  static_cast<int>(r));
            chunk_counts.push_back(static_cast<uint32_t>(data.size() - before));
        }
    } else {
        tw = tl = static_cast<uint32_t>(std::max(16, tile_size & ~15));  // multiple of 16
        const uint32_t across = (width + tw - 1) / tw;
        const uint32_t down = (height + tl - 1) / tl;
        for (uint32_t tr = 0; tr < down; ++tr) {
            for (uint32_t tc = 0; tc < across; ++tc) {
                chunk_offsets.push_back(static_cast<uint32_t>(8 + data.size()));
                const size_t before = data.size();
                for (uint32_t r = tr * tl; r < (tr + 1) * tl; ++r) {
                    for (uint32_t c = tc * tw; c < (tc + 1) * tw; ++c) {
                        if (r < height && c < width) {
                            append_pixel(static_cast<int>(c), static_cast<int>(r));
                        } else {
                            for (uint32_t ch = 0; ch < spp; ++ch) {
                                uint32_t bits;
                                std::memcpy(&bits, &g.nodata, 4);
                                append_u32(data, bits);
                            }
                        }
                    }
                }
                chunk_counts.push_back(static_cast<uint32_t>(data.size() - before));
            }
        }
    }

    std::vector<OutEntry> entries;
    entries.push_back(longs(kImageWidth, {width}));
    entries.push_back(longs(kImageLength, {height}));
    entries.push_back(shorts(kBitsPerSample, std::vector<uint16_t>(spp, 32)));
    entries.push_back(shorts(kCompression, {1}));
    entries.push_back(shorts(kPhotometric, {1}));
    if (!tiled) entries.push_back(longs(kStripOffsets, chunk_offsets));
    entries.push_back(shorts(kSamplesPerPixel, {static_cast<uint16_t>(spp)}));
    if (!tiled) {
        entries.push_back(longs(kRowsPerStrip, {rows_per_strip}));
        entries.push_back(longs(kStripByteCounts, chunk_counts));
    } else {
        entries.push_back(longs(kTileWidth, {tw}));
        entries.push_back(longs(kTileLength, {tl}));
        entries.push_back(longs(kTileOffsets, chunk_offsets));
        entries.push_back(longs(kTileByteCounts, chunk_counts));
    }
    entries.push_back(shorts(kSampleFormat, std::vector<uint16_t>(spp, 3)));
    entries.push_back(doubles(kModelPixelScale, {g.pixel_size, g.pixel_size, 0.0}));
    const double ul_y = g.origin_y + g.height * g.pixel_size;
    entries.push_back(doubles(kModelTiepoint, {0.0, 0.0, 0.0, g.origin_x, ul_y, 0.0}));
    // Minimal GeoKey directory: model type "projected".
    entries.push_back(shorts(kGeoKeyDirectory, {1, 1, 0, 1, 1024, 0, 1, 1}));
    if (!g.crs_tag.empty()) entries.push_back(ascii(kGeoAsciiParams, g.crs_tag + "|"));
    {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%g", static_cast<double>(g.nodata));
        entries.push_back(ascii(kGdalNodata, buf));
    }

    const uint32_t ifd_offset = static_cast<uint32_t>(8 + data.size());
    const uint32_t ifd_bytes = 2 + static_cast<uint32_t>(entries.size()) * 12 + 4;
    uint32_t spill_offset = ifd_offset + ifd_bytes;

    std::vector<uint8_t> ifd, spill;
    append_u16(ifd, static_cast<uint16_t>(entries.size()));
    for (const OutEntry& e : entries) {
        append_u16(ifd, e.tag);
        append_u16(ifd, e.type);
        append_u32(ifd, e.count);
        if (e.payload.size() <= 4) {
            size_t i = 0;
            for (; i < e.payload.size(); ++i) ifd.push_back(e.payload[i]);
            for (; i < 4; ++i) ifd.push_back(0);
        } else {
            append_u32(ifd, spill_offset + static_cast<uint32_t>(spill.size()));
            spill.insert(spill.end(), e.payload.begin(), e.payload.end());
            if (spill.size() % 2) spill.push_back(0);  // keep offsets word-aligned
        }
    }
    append_u32(ifd, 0);  // no next IFD

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError(path + ": cannot open for writing");
    const uint8_t header[8] = {'I', 'I', 42, 0,
                               static_cast<uint8_t>(ifd_offset),
                               static_cast<uint8_t>(ifd_offset >> 8),
                               static_cast<uint8_t>(ifd_offset >> 16),
                               static_cast<uint8_t>(ifd_offset >> 24)};
    os.write(reinterpret_cast<const char*>(header), 8);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size()));
    os.write(reinterpret_cast<const char*>(ifd.data()),
             static_cast<std::streamsize>(ifd.size()));
    os.write(reinterpret_cast<const char*>(spill.data()),
             static_cast<std::streamsize>(spill.size()));
    if (!os) throw DataError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Raw grid format: 64-byte header, then row-major float32 samples.

inline void write_raw_grid(const RasterGrid& g, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError(path + ": cannot open for writing");
    ByteWriter w(os);
    w.magic("CUQG");
    w.u32(1);  // version
    w.u32(static_cast<uint32_t>(g.width));
    w.u32(static_cast<uint32_t>(g.height));
    w.u32(static_cast<uint32_t>(g.channels));
    w.f64(g.origin_x);
    w.f64(g.origin_y);
    w.f64(g.pixel_size);
    w.f32(g.nodata);
    for (int i = 0; i < 16; ++i) w.u8(0);  // reserved; header is 64 bytes
    w.f32_array(g.data.data(), g.data.size());
}

inline RasterGrid read_raw_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(path + ": cannot open");
    ByteReader r(is, path);
    r.expect_magic("CUQG", path);
    const uint32_t version = r.u32();
    if (version != 1) throw DataError(path + ": unsupported raw grid version");
    const uint32_t width = r.u32();
    const uint32_t height = r.u32();
    const uint32_t channels = r.u32();
    if (width == 0 || height == 0 || channels == 0)
        throw DataError(path + ": degenerate raw grid dimensions");
    const double ox = r.f64();
    const double oy = r.f64();
    const double ps = r.f64();
    const float nodata = r.f32();
    for (int i = 0; i < 16; ++i) r.u8();
    RasterGrid g = RasterGrid::make(static_cast<int>(width), static_cast<int>(height),
                                    static_cast<int>(channels), ox, oy, ps, nodata);
    r.f32_array(g.data.data(), g.data.size());
    return g;
}

// Dispatch by content (read) or extension (write).
inline RasterGrid read_raster(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(path + ": cannot open");
    char head[4] = {};
    is.read(head, 4);
    is.close();
    if (std::memcmp(head, "CUQG", 4) == 0) return read_raw_grid(path);
    return read_geotiff(path);
}

inline void write_raster(const RasterGrid& g, const std::string& path) {
    const auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return path.size() >= s.size() && path.compare(path.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".cuqg") || ends_with(".raw"))
        write_raw_grid(g, path);
    else
        write_geotiff(g, path);
}

}  // namespace canopyuq
