#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "canopyuq/core.hpp"
#include "canopyuq/raster_io.hpp"

using namespace canopyuq;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "canopyuq_test_io";
    fs::create_directories(dir);
    return dir / name;
}

RasterGrid random_raster(uint64_t seed, int w, int h, int c) {
    Rng rng(seed);
    RasterGrid g = RasterGrid::make(w, h, c, rng.uniform(-1000.0, 1000.0),
                                    rng.uniform(-1000.0, 1000.0), 30.0, -9999.0f);
    g.crs_tag = "EASE2-N-TEST";
    for (auto& v : g.data) v = static_cast<float>(rng.uniform(-100.0, 100.0));
    g.at(1, 2, 0) = g.nodata;
    return g;
}

void check_equal(const RasterGrid& a, const RasterGrid& b) {
    CHECK(a.width == b.width);
    CHECK(a.height == b.height);
    CHECK(a.channels == b.channels);
    CHECK_THAT(a.origin_x, Catch::Matchers::WithinAbs(b.origin_x, 1e-9));
    CHECK_THAT(a.origin_y, Catch::Matchers::WithinAbs(b.origin_y, 1e-9));
    CHECK(a.pixel_size == b.pixel_size);
    CHECK(a.nodata == b.nodata);
    CHECK(a.data == b.data);  // bit-exact
}

}  // namespace

TEST_CASE("geotiff striped round-trip is bit-exact") {
    const RasterGrid g = random_raster(1, 37, 23, 4);
    const auto path = temp_file("striped.tif");
    write_geotiff(g, path.string(), /*tiled=*/false);
    const RasterGrid back = read_geotiff(path.string());
    check_equal(g, back);
    CHECK(back.crs_tag == g.crs_tag);
}

TEST_CASE("geotiff tiled round-trip is bit-exact") {
    const RasterGrid g = random_raster(2, 100, 70, 2);
    const auto path = temp_file("tiled.tif");
    write_geotiff(g, path.string(), /*tiled=*/true, 48);
    const RasterGrid back = read_geotiff(path.string());
    check_equal(g, back);
}

TEST_CASE("geotiff single channel, single strip") {
    const RasterGrid g = random_raster(3, 8, 8, 1);
    const auto path = temp_file("small.tif");
    write_geotiff(g, path.string());
    check_equal(g, read_geotiff(path.string()));
}

TEST_CASE("geotiff reader rejects unsupported layouts with clear errors") {
    const auto path = temp_file("bad.tif");
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "not a tiff at all";
    }
    CHECK_THROWS_AS(read_geotiff(path.string()), DataError);

    // A real file, then truncate it.
    const RasterGrid g = random_raster(4, 64, 64, 3);
    const auto trunc_path = temp_file("trunc.tif");
    write_geotiff(g, trunc_path.string());
    {
        std::ifstream is(trunc_path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() / 2);
        std::ofstream os(trunc_path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(read_geotiff(trunc_path.string()), DataError);
}

TEST_CASE("geotiff reader handles big-endian files") {
    // Hand-built 2x2 single-channel big-endian classic TIFF, one strip.
    const auto path = temp_file("bigendian.tif");
    std::vector<uint8_t> out;
    const auto u16be = [&](uint16_t v) {
        out.push_back(static_cast<uint8_t>(v >> 8));
        out.push_back(static_cast<uint8_t>(v));
    };
    const auto u32be = [&](uint32_t v) {
        out.push_back(static_cast<uint8_t>(v >> 24));
        out.push_back(static_cast<uint8_t>(v >> 16));
        out.push_back(static_cast<uint8_t>(v >> 8));
        out.push_back(static_cast<uint8_t>(v));
    };
    const auto f32be = [&](float f) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        u32be(bits);
    };
    out.push_back('M');
    out.push_back('M');
    u16be(42);
    u32be(8 + 16);  // IFD after the 4 float pixels
    // Pixel data (rows top-down): row0 = {1, 2}, row1 = {3, 4}.
    f32be(1.0f);
    f32be(2.0f);
    f32be(3.0f);
    f32be(4.0f);
    // IFD with 8 entries.
    u16be(8);
    const auto entry = [&](uint16_t tag, uint16_t type, uint32_t count, uint32_t value) {
        u16be(tag);
        u16be(type);
        u32be(count);
        u32be(value);
    };
    entry(256, 3, 1, 2u << 16);          // ImageWidth = 2 (SHORT packs high)
    entry(257, 3, 1, 2u << 16);          // ImageLength = 2
    entry(258, 3, 1, 32u << 16);         // BitsPerSample = 32
    entry(259, 3, 1, 1u << 16);          // Compression = none
    entry(273, 4, 1, 8);                 // StripOffsets
    entry(278, 4, 1, 2);                 // RowsPerStrip
    entry(279, 4, 1, 16);                // StripByteCounts
    entry(339, 3, 1, 3u << 16);          // SampleFormat = IEEE float
    u32be(0);                            // next IFD
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    os.close();

    const RasterGrid g = read_geotiff(path.string());
    REQUIRE(g.width == 2);
    REQUIRE(g.height == 2);
    // TIFF top row is the north row -> our row 1.
    CHECK(g.at(0, 1) == 1.0f);
    CHECK(g.at(1, 1) == 2.0f);
    CHECK(g.at(0, 0) == 3.0f);
    CHECK(g.at(1, 0) == 4.0f);
}

TEST_CASE("raw grid round-trip and header validation") {
    const RasterGrid g = random_raster(5, 19, 31, 5);
    const auto path = temp_file("grid.cuqg");
    write_raw_grid(g, path.string());

    // 64-byte header before the samples.
    CHECK(fs::file_size(path) == 64 + g.data.size() * 4);

    const RasterGrid back = read_raw_grid(path.string());
    check_equal(g, back);

    // Corrupt magic.
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(read_raw_grid(path.string()), DataError);
}

TEST_CASE("read_raster dispatches by content, write_raster by extension") {
    const RasterGrid g = random_raster(6, 10, 10, 1);
    const auto tif = temp_file("auto.tif");
    const auto raw = temp_file("auto.cuqg");
    write_raster(g, tif.string());
    write_raster(g, raw.string());
    check_equal(g, read_raster(tif.string()));
    check_equal(g, read_raster(raw.string()));
}
