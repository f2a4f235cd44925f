#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "canopyuq/calibrate.hpp"
#include "canopyuq/core.hpp"

using namespace canopyuq;

namespace {

// 1-D golden-section search oracle for the calibration objective
// sum(log(s*var) + e^2/(s*var)).
double golden_section_scale(const std::vector<double>& variances,
                            const std::vector<double>& errors) {
    const auto objective = [&](double log_s) {
        const double s = std::exp(log_s);
        double total = 0.0;
        for (size_t i = 0; i < variances.size(); ++i)
            total += std::log(s * variances[i]) + errors[i] * errors[i] / (s * variances[i]);
        return total;
    };
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = std::log(1e-3), hi = std::log(1e3);
    double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
    double f1 = objective(x1), f2 = objective(x2);
    for (int it = 0; it < 200; ++it) {
        if (f1 < f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    return std::exp(0.5 * (lo + hi));
}

}  // namespace

TEST_CASE("fit_scale: already calibrated data gives s=1, half-variance gives s=2") {
    Rng rng(1);
    std::vector<double> variances, errors;
    for (int i = 0; i < 500; ++i) {
        const double e = rng.uniform(-4.0, 4.0);
        errors.push_back(e);
        variances.push_back(e * e);  // sigma^2 == e^2 exactly
    }
    CHECK_THAT(fit_scale(variances, errors), Catch::Matchers::WithinRel(1.0, 1e-12));

    std::vector<double> halves = variances;
    for (double& v : halves) v *= 0.5;
    CHECK_THAT(fit_scale(halves, errors), Catch::Matchers::WithinRel(2.0, 1e-12));
}

TEST_CASE("fit_scale matches the golden-section oracle on heteroscedastic data") {
    Rng rng(2);
    std::vector<double> variances, errors;
    for (int i = 0; i < 2000; ++i) {
        const double sigma = rng.uniform(0.5, 5.0);
        variances.push_back(sigma * sigma * rng.uniform(0.5, 2.0));
        errors.push_back(sigma * rng.normal());
    }
    const double closed = fit_scale(variances, errors);
    const double searched = golden_section_scale(variances, errors);
    CHECK_THAT(closed, Catch::Matchers::WithinRel(searched, 1e-6));

    // First-order optimality of the closed form.
    double mean_ratio = 0.0;
    for (size_t i = 0; i < variances.size(); ++i)
        mean_ratio += errors[i] * errors[i] / (closed * variances[i]);
    mean_ratio /= static_cast<double>(variances.size());
    CHECK_THAT(mean_ratio, Catch::Matchers::WithinRel(1.0, 1e-9));
}

TEST_CASE("fit_scale enforces preconditions") {
    std::vector<double> variances(150, 1.0), errors(150, 0.5);
    CHECK_NOTHROW(fit_scale(variances, errors));
    variances[3] = 0.0;
    CHECK_THROWS_AS(fit_scale(variances, errors), DataError);
    CHECK_THROWS_AS(fit_scale(std::vector<double>(50, 1.0), std::vector<double>(50, 1.0)),
                    DataError);
}

TEST_CASE("calibration curve: calibrated draws hug the identity") {
    Rng rng(3);
    const int per_bin = 10000, n_bins = 10;
    std::vector<double> sigmas, errors;
    for (int i = 0; i < per_bin * n_bins; ++i) {
        const double sigma = rng.uniform(0.5, 4.0);
        sigmas.push_back(sigma);
        errors.push_back(sigma * rng.normal());
    }
    const auto curve = calibration_curve(sigmas, errors, n_bins);
    REQUIRE(curve.size() == static_cast<size_t>(n_bins));
    int64_t total = 0;
    double prev_sigma = -1.0;
    for (const CurvePoint& pt : curve) {
        total += pt.count;
        CHECK(pt.mean_sigma >= prev_sigma);  // bins ordered by uncertainty
        prev_sigma = pt.mean_sigma;
        // Gaussian errors with std = sigma: bin RMSE ~ bin mean sigma within
        // sampling noise (a few percent at 10k per bin).
        CHECK_THAT(pt.rmse, Catch::Matchers::WithinRel(pt.mean_sigma, 0.05));
    }
    CHECK(total == per_bin * n_bins);
}

TEST_CASE("calibration curve: degenerate constant sigma and axis scaling") {
    std::vector<double> sigmas(200, 2.0), errors(200);
    Rng rng(4);
    for (auto& e : errors) e = 2.0 * rng.normal();
    const auto curve = calibration_curve(sigmas, errors, 10);
    for (const CurvePoint& pt : curve) CHECK(pt.mean_sigma == 2.0);

    // Doubling sigma doubles the x-values, leaves the y-values unchanged.
    std::vector<double> doubled(sigmas);
    for (double& s : doubled) s *= 2.0;
    const auto curve2 = calibration_curve(doubled, errors, 10);
    for (size_t i = 0; i < curve.size(); ++i) {
        CHECK_THAT(curve2[i].mean_sigma, Catch::Matchers::WithinRel(2.0 * curve[i].mean_sigma, 1e-12));
        CHECK(curve2[i].rmse == curve[i].rmse);
    }

    CHECK_THROWS_AS(calibration_curve({}, {}, 10), DataError);
}

TEST_CASE("rmse-recall: flat for constant errors, non-decreasing when error tracks sigma") {
    std::vector<double> sigmas, errors;
    for (int i = 0; i < 500; ++i) {
        sigmas.push_back(0.1 * i);
        errors.push_back(3.0);
    }
    const auto flat = rmse_recall_curve(sigmas, errors);
    REQUIRE(flat.size() == 100);
    for (double v : flat) CHECK_THAT(v, Catch::Matchers::WithinRel(3.0, 1e-12));

    errors.clear();
    for (int i = 0; i < 500; ++i) errors.push_back(sigmas[i] * 0.5);
    const auto rising = rmse_recall_curve(sigmas, errors);
    for (size_t i = 1; i < rising.size(); ++i) CHECK(rising[i] >= rising[i - 1] - 1e-12);

    // The 100% point equals the global RMSE exactly.
    double sq = 0.0;
    for (double e : errors) sq += e * e;
    const double global_rmse = std::sqrt(sq / static_cast<double>(errors.size()));
    CHECK(rising.back() == global_rmse);
}

TEST_CASE("expected calibration error: identity gives 0, constant offset gives the offset") {
    std::vector<CurvePoint> identity(5);
    for (int i = 0; i < 5; ++i) identity[i] = {1.0 + i, 1.0 + i, 100};
    CHECK(expected_calibration_error(identity) == 0.0);

    std::vector<CurvePoint> offset(5);
    for (int i = 0; i < 5; ++i) offset[i] = {1.0 + i, 1.0 + i + 0.7, 100};
    CHECK_THAT(expected_calibration_error(offset), Catch::Matchers::WithinRel(0.7, 1e-12));
}

TEST_CASE("calibrate: mis-scaled variances are recovered and ECE improves") {
    Rng rng(5);
    std::vector<double> variances, errors;
    for (int i = 0; i < 20000; ++i) {
        const double sigma = rng.uniform(0.5, 4.0);
        errors.push_back(sigma * rng.normal());
        variances.push_back(sigma * sigma * 4.0);  // deliberately 4x too large
    }
    const CalibrationResult result = calibrate(variances, errors);
    CHECK_THAT(result.scale, Catch::Matchers::WithinRel(0.25, 0.05));
    CHECK(result.post_ece < 0.5 * result.pre_ece);
}
