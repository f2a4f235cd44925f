#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/harmonize.hpp"

using namespace canopyuq;

namespace {

// O(n*m) brute-force intersection oracle.
std::vector<std::vector<int>> brute_force_table(const std::vector<BBox>& coarse,
                                                const std::vector<BBox>& hires) {
    std::vector<std::vector<int>> table(coarse.size());
    for (size_t c = 0; c < coarse.size(); ++c)
        for (size_t h = 0; h < hires.size(); ++h)
            if (coarse[c].intersects(hires[h])) table[c].push_back(static_cast<int>(h));
    return table;
}

}  // namespace

TEST_CASE("intersection table: disjoint sets and exact subdivision") {
    const std::vector<BBox> coarse{{0, 0, 10, 10}};
    const std::vector<BBox> far{{100, 100, 110, 110}};
    const auto empty = build_intersection_table(coarse, far);
    CHECK(empty[0].empty());

    // A 4x4 hires grid exactly subdividing one coarse tile: 16 entries.
    std::vector<BBox> hires;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            hires.push_back({x * 2.5, y * 2.5, (x + 1) * 2.5, (y + 1) * 2.5});
    const auto table = build_intersection_table(coarse, hires);
    CHECK(table[0].size() == 16);
    for (const auto& e : table[0]) CHECK(e.overlap.area() > 0.0);
}

TEST_CASE("intersection table matches the brute-force oracle on random rectangles") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<BBox> coarse, hires;
        for (int i = 0; i < 40; ++i) {
            const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
            coarse.push_back({x, y, x + rng.uniform(1, 20), y + rng.uniform(1, 20)});
        }
        for (int i = 0; i < 60; ++i) {
            const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
            hires.push_back({x, y, x + rng.uniform(1, 15), y + rng.uniform(1, 15)});
        }
        const auto fast = build_intersection_table(coarse, hires);
        const auto slow = brute_force_table(coarse, hires);
        REQUIRE(fast.size() == slow.size());
        for (size_t c = 0; c < fast.size(); ++c) {
            REQUIRE(fast[c].size() == slow[c].size());
            for (size_t i = 0; i < fast[c].size(); ++i) {
                CHECK(fast[c][i].hires_id == slow[c][i]);
                const BBox expected = coarse[c].intersection(hires[fast[c][i].hires_id]);
                CHECK(fast[c][i].overlap.min_x == expected.min_x);
                CHECK(fast[c][i].overlap.max_y == expected.max_y);
            }
        }
    }
}

TEST_CASE("zonal p98: constants, single pixels, and the 1..100 interpolation case") {
    RasterGrid hires = RasterGrid::make(10, 10, 1, 0, 0, 1.0, -9999.0f, 7.0f);
    const BBox zone{0, 0, 10, 10};
    const auto constant = zonal_p98(zone, hires);
    REQUIRE(constant.has_value());
    CHECK(*constant == 7.0);

    // Values 1..100: linear-interpolation p98 at rank 0.98*99 = 97.02.
    RasterGrid grid = RasterGrid::make(10, 10, 1, 0, 0, 1.0);
    for (int i = 0; i < 100; ++i) grid.data[i] = static_cast<float>(i + 1);
    const auto p98 = zonal_p98(zone, grid);
    REQUIRE(p98.has_value());
    CHECK_THAT(*p98, Catch::Matchers::WithinRel(98.02, 1e-9));

    // One valid pixel.
    RasterGrid sparse = RasterGrid::make(10, 10, 1, 0, 0, 1.0, -9999.0f, -9999.0f);
    sparse.at(4, 4) = 13.0f;
    const auto single = zonal_p98(zone, sparse);
    REQUIRE(single.has_value());
    CHECK(*single == 13.0);

    // Empty zone.
    CHECK_FALSE(zonal_p98(BBox{50, 50, 60, 60}, grid).has_value());
}

TEST_CASE("zonal percentile uses pixel centers (half-open zones partition)") {
    RasterGrid hires = RasterGrid::make(4, 4, 1, 0, 0, 1.0);
    for (size_t i = 0; i < hires.data.size(); ++i) hires.data[i] = static_cast<float>(i);
    // Two adjacent zones splitting the raster at x=2: centers 0.5, 1.5 go
    // left; 2.5, 3.5 go right; nothing is counted twice.
    const BBox left{0, 0, 2, 4}, right{2, 0, 4, 4};
    std::vector<double> all;
    for (const BBox& zone : {left, right}) {
        for (int row = 0; row < 4; ++row)
            for (int col = 0; col < 4; ++col)
                if (zone.contains(col + 0.5, row + 0.5)) all.push_back(hires.at(col, row));
    }
    CHECK(all.size() == 16);
}

TEST_CASE("harmonize: constant cover and checkerboard") {
    RasterGrid coarse = RasterGrid::make(4, 4, 1, 0, 0, 60.0);
    RasterGrid hires = RasterGrid::make(240, 240, 1, 0, 0, 1.0, -9999.0f, 12.0f);
    const RasterGrid constant = harmonize(coarse, {hires});
    for (const float v : constant.data) CHECK(v == 12.0f);

    // Checkerboard 0/20 at 60:1 resolution: p98 of half-zeros-half-20s is 20.
    RasterGrid board = RasterGrid::make(240, 240, 1, 0, 0, 1.0);
    for (int row = 0; row < 240; ++row)
        for (int col = 0; col < 240; ++col)
            board.at(col, row) = ((col + row) % 2) ? 20.0f : 0.0f;
    const RasterGrid checker = harmonize(coarse, {board});
    for (const float v : checker.data) CHECK(v == 20.0f);

    // No coverage -> nodata.
    RasterGrid offset_coarse = RasterGrid::make(2, 2, 1, 1000, 1000, 60.0);
    const RasterGrid empty = harmonize(offset_coarse, {hires});
    for (const float v : empty.data) CHECK(empty.is_nodata(v));
}

TEST_CASE("harmonize equals the brute-force gather oracle exactly on a random mosaic") {
    Rng rng(2);
    // 8x8 coarse grid at 60 m; hires mosaic of 4 quadrant tiles at 1 m.
    const int coarse_n = 8;
    RasterGrid coarse = RasterGrid::make(coarse_n, coarse_n, 1, 0, 0, 60.0);
    std::vector<RasterGrid> tiles;
    const int half = coarse_n * 60 / 2;
    for (int ty = 0; ty < 2; ++ty) {
        for (int tx = 0; tx < 2; ++tx) {
            RasterGrid tile = RasterGrid::make(half, half, 1, tx * half, ty * half, 1.0);
            for (auto& v : tile.data)
                v = rng.uniform() < 0.05 ? tile.nodata
                                         : static_cast<float>(rng.uniform(0.0, 40.0));
            tiles.push_back(std::move(tile));
        }
    }
    const RasterGrid result = harmonize(coarse, tiles);

    for (int row = 0; row < coarse_n; ++row) {
        for (int col = 0; col < coarse_n; ++col) {
            const BBox zone = pixel_bbox(coarse, col, row);
            std::vector<double> values;
            double lo = 1e30, hi = -1e30;
            for (const RasterGrid& tile : tiles) {
                for (int trow = 0; trow < tile.height; ++trow) {
                    for (int tcol = 0; tcol < tile.width; ++tcol) {
                        const double cx = tile.origin_x + (tcol + 0.5) * tile.pixel_size;
                        const double cy = tile.origin_y + (trow + 0.5) * tile.pixel_size;
                        if (!zone.contains(cx, cy)) continue;
                        const float v = tile.at(tcol, trow);
                        if (tile.is_nodata(v)) continue;
                        values.push_back(v);
                        lo = std::min(lo, static_cast<double>(v));
                        hi = std::max(hi, static_cast<double>(v));
                    }
                }
            }
            REQUIRE_FALSE(values.empty());
            std::sort(values.begin(), values.end());
            const double rank = 0.98 * static_cast<double>(values.size() - 1);
            const size_t i = static_cast<size_t>(rank);
            const double frac = rank - static_cast<double>(i);
            const double expected =
                i + 1 < values.size() ? values[i] + frac * (values[i + 1] - values[i])
                                      : values.back();
            const float got = result.at(col, row);
            REQUIRE(got == static_cast<float>(expected));  // exact
            CHECK(got >= lo);
            CHECK(got <= hi);
        }
    }
}

TEST_CASE("harmonize: disjoint tile order does not matter; p98 is monotone in added highs") {
    Rng rng(3);
    RasterGrid coarse = RasterGrid::make(2, 2, 1, 0, 0, 30.0);
    std::vector<RasterGrid> tiles;
    for (int t = 0; t < 2; ++t) {
        RasterGrid tile = RasterGrid::make(30, 60, 1, t * 30.0, 0, 1.0);
        for (auto& v : tile.data) v = static_cast<float>(rng.uniform(0.0, 30.0));
        tiles.push_back(std::move(tile));
    }
    const RasterGrid forward_order = harmonize(coarse, tiles);
    std::vector<RasterGrid> reversed{tiles[1], tiles[0]};
    const RasterGrid reverse_order = harmonize(coarse, reversed);
    CHECK(forward_order.data == reverse_order.data);

    // Adding a value above the current p98 cannot decrease the output.
    RasterGrid boosted = tiles[0];
    boosted.at(0, 0) = 39.5f;
    const RasterGrid after = harmonize(coarse, {boosted, tiles[1]});
    CHECK(after.at(0, 0) >= forward_order.at(0, 0));
}
