#pragma once

// Seasonal median compositing with per-pixel recursive fallback to earlier
// years: observations are accumulated year by year (target year first,
// stepping back up to `lookback` years), and a pixel stops accepting new
// years once it has at least `min_obs` valid observations. The output is the
// per-pixel median of whatever was accumulated; pixels with no valid
// observation anywhere become nodata.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/grid.hpp"

namespace canopyuq {

enum class Season : uint8_t { winter = 0, summer = 1, fall = 2 };
enum class Sensor : uint8_t { optical = 0, sar = 1 };

inline const char* season_name(Season s) {
    switch (s) {
        case Season::winter: return "winter";
        case Season::summer: return "summer";
        default: return "fall";
    }
}

inline Season parse_season(const std::string& s) {
    if (s == "winter") return Season::winter;
    if (s == "summer") return Season::summer;
    if (s == "fall") return Season::fall;
    throw ArgError("unknown season '" + s + "' (expected winter|summer|fall)");
}

inline Sensor parse_sensor(const std::string& s) {
    if (s == "optical") return Sensor::optical;
    if (s == "sar") return Sensor::sar;
    throw ArgError("unknown sensor '" + s + "' (expected optical|sar)");
}

// One acquisition. qa_channel, when >= 0, names the channel interpreted by the
// validity predicate and excluded from the composited output.
struct Observation {
    RasterGrid image;
    int year = 0;
    Season season = Season::summer;
    Sensor sensor = Sensor::optical;
    int qa_channel = -1;
};

struct ObservationStack {
    std::vector<Observation> images;
};

// Per-pixel validity decision from the QA value. SAR images and images
// without a QA channel fall back to "valid wherever not nodata".
using ValidityPredicate = std::function<bool(float qa_value, Season, Sensor)>;

// QA bit layout (fill, dilated cloud, cirrus, cloud, cloud shadow, snow in
// bits 0..5). Snow only invalidates summer/fall scenes; winter snow is signal.
inline ValidityPredicate default_qa_predicate() {
    return [](float qa_value, Season season, Sensor sensor) {
        if (sensor == Sensor::sar) return true;
        const auto bits = static_cast<uint32_t>(qa_value);
        if (bits & 0x1Fu) return false;  // fill or any cloud-family flag
        if ((bits & 0x20u) && season != Season::winter) return false;
        return true;
    };
}

struct CompositeParams {
    int target_year = 0;
    Season season = Season::summer;
    Sensor sensor = Sensor::optical;
    int min_obs = 1;   // N
    int lookback = 2;  // W, in years
    ValidityPredicate predicate;  // defaults to default_qa_predicate()
};

// True exactly where the predicate holds and no data channel is nodata.
inline std::vector<uint8_t> validity_mask(const Observation& obs,
                                          const ValidityPredicate& predicate) {
    const RasterGrid& img = obs.image;
    std::vector<uint8_t> mask(img.pixel_count(), 1);
    const ValidityPredicate& pred = predicate ? predicate : default_qa_predicate();
    for (size_t p = 0; p < img.pixel_count(); ++p) {
        bool ok = true;
        for (int ch = 0; ch < img.channels && ok; ++ch) {
            const float v = img.data[p * img.channels + ch];
            if (ch == obs.qa_channel) {
                if (img.is_nodata(v) || !pred(v, obs.season, obs.sensor)) ok = false;
            } else if (img.is_nodata(v)) {
                ok = false;
            }
        }
        mask[p] = ok ? 1 : 0;
    }
    return mask;
}

// Count of valid observations per pixel over a stack.
inline RasterGrid pixel_counter(const ObservationStack& stack,
                                const ValidityPredicate& predicate = {}) {
    if (stack.images.empty()) return RasterGrid{};
    const RasterGrid& first = stack.images.front().image;
    RasterGrid counts = RasterGrid::make(first.width, first.height, 1, first.origin_x,
                                         first.origin_y, first.pixel_size, -1.0f, 0.0f);
    for (const Observation& obs : stack.images) {
        if (!obs.image.same_geometry(first))
            throw DataError("pixel_counter: observation grids are not co-registered");
        const auto mask = validity_mask(obs, predicate);
        for (size_t p = 0; p < mask.size(); ++p) counts.data[p] += mask[p];
    }
    return counts;
}

namespace detail {

// Median with even counts averaged in double, then rounded once to float.
// The brute-force test oracle follows the same rule, so outputs compare
// bit-identical.
inline float median_of(std::vector<float>& values) {
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    const double lo = values[n / 2 - 1];
    const double hi = values[n / 2];
    return static_cast<float>(0.5 * (lo + hi));
}

}  // namespace detail

// `source(year)` returns the (possibly empty) co-registered stack for that
// year, already filtered to the requested season and sensor.
inline RasterGrid composite(const std::function<ObservationStack(int)>& source,
                            const CompositeParams& p) {
    if (p.lookback < 0) throw ArgError("composite: lookback must be >= 0");
    if (p.min_obs < 1) throw ArgError("composite: min_obs must be >= 1");

    // First pass over years to find the grid geometry.
    std::vector<ObservationStack> stacks;
    const Observation* reference_obs = nullptr;
    for (int back = 0; back <= p.lookback; ++back) {
        stacks.push_back(source(p.target_year - back));
        if (!reference_obs && !stacks.back().images.empty())
            reference_obs = &stacks.back().images.front();
    }
    if (!reference_obs) throw DataError("composite: no observations in any queried year");
    const RasterGrid* reference = &reference_obs->image;

    const int data_channels =
        reference->channels - (reference_obs->qa_channel >= 0 ? 1 : 0);
    if (data_channels < 1) throw DataError("composite: no data channels besides QA");

    const size_t npix = reference->pixel_count();
    std::vector<uint32_t> counts(npix, 0);
    // Accumulated valid observations, one value list per pixel per channel.
    std::vector<std::vector<float>> acc(npix * static_cast<size_t>(data_channels));

    for (const ObservationStack& stack : stacks) {
        // Gate on the counts as they stood before this year: a pixel short of
        // min_obs takes every valid observation the year offers.
        const std::vector<uint32_t> counts_before = counts;
        for (const Observation& obs : stack.images) {
            if (!obs.image.same_geometry(*reference))
                throw DataError("composite: observation grids are not co-registered");
            if (obs.image.channels != reference->channels ||
                (obs.qa_channel >= 0) != (reference_obs->qa_channel >= 0))
                throw DataError("composite: observation channel layouts differ");
            if (obs.season != p.season || obs.sensor != p.sensor)
                throw DataError("composite: source() returned a mismatched season/sensor");
            const auto mask = validity_mask(obs, p.predicate);
            for (size_t px = 0; px < npix; ++px) {
                if (!mask[px] || counts_before[px] >= static_cast<uint32_t>(p.min_obs))
                    continue;
                int dch = 0;
                for (int ch = 0; ch < obs.image.channels; ++ch) {
                    if (ch == obs.qa_channel) continue;
                    acc[px * data_channels + dch].push_back(
                        obs.image.data[px * obs.image.channels + ch]);
                    ++dch;
                }
                ++counts[px];
            }
        }
        bool any_short = false;
        for (size_t px = 0; px < npix && !any_short; ++px)
            any_short = counts[px] < static_cast<uint32_t>(p.min_obs);
        if (!any_short) break;
    }

    RasterGrid out = RasterGrid::make(reference->width, reference->height, data_channels,
                                      reference->origin_x, reference->origin_y,
                                      reference->pixel_size, reference->nodata);
    out.crs_tag = reference->crs_tag;
    for (size_t px = 0; px < npix; ++px) {
        for (int ch = 0; ch < data_channels; ++ch) {
            auto& values = acc[px * data_channels + ch];
            out.data[px * data_channels + ch] =
                values.empty() ? out.nodata : detail::median_of(values);
        }
    }
    return out;
}

// Convenience entry point over a flat observation list; groups by year and
// filters by season/sensor.
inline RasterGrid composite(const std::vector<Observation>& observations,
                            const CompositeParams& p) {
    return composite(
        [&](int year) {
            ObservationStack stack;
            for (const Observation& obs : observations)
                if (obs.year == year && obs.season == p.season && obs.sensor == p.sensor)
                    stack.images.push_back(obs);
            return stack;
        },
        p);
}

}  // namespace canopyuq
