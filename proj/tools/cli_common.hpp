#pragma once

// Shared CLI plumbing: exit codes, the key=value config reader, manifest
// parsing, and small CSV helpers.

#include <CLI11.hpp>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/dataset.hpp"
#include "canopyuq/grid.hpp"

namespace canopyuq::cli {

// Exit codes: 0 success, 2 bad arguments, 3 data error, 4 numeric failure.
enum ExitCode : int {
    kOk = 0,
    kBadArgs = 2,
    kDataError = 3,
    kNumericError = 4,
};

// Plain-text configuration: optional [section] headers, key=value lines,
// '#' comments. Keys are stored as "section.key" ("" section = bare key).
class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError(path + ": cannot open config");
        Config cfg;
        std::string line, section;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[' && line.back() == ']') {
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw DataError(path + ":" + std::to_string(line_no) +
                                ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw DataError(path + ":" + std::to_string(line_no) + ": empty key");
            cfg.values_[section.empty() ? key : section + "." + key] = value;
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback = "") const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw DataError("config key '" + key + "': not a number: " + it->second);
        }
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw DataError("config key '" + key + "': not an integer: " + it->second);
        }
    }

    const std::map<std::string, std::string>& all() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

// Manifest: one entry per line, "path [year]", '#' comments allowed.
struct ManifestEntry {
    std::string path;
    int year = 0;
    bool has_year = false;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError(path + ": cannot open manifest");
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        ManifestEntry e;
        if (!(ss >> e.path)) continue;
        if (ss >> e.year) e.has_year = true;
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw DataError(path + ": empty manifest");
    return entries;
}

// Shared between build-dataset, infer, and pipeline (defined in cmd_dataset.cpp).
RasterGrid stack_covariates(const std::vector<std::string>& paths);
void save_stats(const OnlineStats& stats, const std::string& path);
OnlineStats load_stats(const std::string& path);

struct DatasetBuildSpec {
    std::string out_dir;
    int tile_rows = 10;
    int tile_cols = 10;
    int folds = 5;
    int subfolds = 5;
    int patch_size = 64;
    double overlap = 0.25;
    double min_density = 0.01;
    uint64_t seed = 0;
    int year = 0;
    bool global_stats = false;
};

struct DatasetLayout {
    TileGrid tiles;
    std::vector<FoldSpec> folds;
};

// Normalizes per fold, extracts patches per tile, writes
// fold{F}_stats.csv, fold{F}_test.cuqr, fold{F}_sub{S}_{train,val}.cuqr.
DatasetLayout dataset_build(const RasterGrid& covariates, const RasterGrid& target,
                            const DatasetBuildSpec& spec);

// Subcommand registry; each cmd_*.cpp contributes one.
void register_composite(CLI::App& app);
void register_dataset(CLI::App& app);   // build-dataset and synth
void register_weights(CLI::App& app);
void register_train(CLI::App& app);
void register_infer(CLI::App& app);
void register_calibrate(CLI::App& app);
void register_harmonize(CLI::App& app);
void register_evaluate(CLI::App& app);
void register_pipeline(CLI::App& app);

}  // namespace canopyuq::cli
