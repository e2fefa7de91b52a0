#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace jemlab {

// Calibration data: equal-width confidence bins over [0,1] plus the ECE
// scalar sum((count_i/N) * |acc_i - conf_i|).
struct ReliabilityReport {
    std::size_t bins = 20;
    std::vector<double> bin_lo, bin_hi;   // bins entries each
    std::vector<double> mean_confidence;  // 0 for empty bins
    std::vector<double> accuracy;         // 0 for empty bins
    std::vector<std::size_t> count;
    double ece = 0.0;
    std::size_t total = 0;

    std::string to_json() const;
    std::string to_csv() const;
};

struct OodReport {
    std::string method;  // "density" | "maxprob"
    std::vector<double> in_scores, out_scores;
    double auroc = 0.0;

    std::string to_json() const;
    // Binned score histogram (shared equal-width bins over both sets).
    std::string histogram_csv(std::size_t bins = 50) const;
};

// Aggregate energy over a dataset subset along 1 or 2 random parameter-space
// directions. For 2 directions, values are row-major over offsets x offsets.
struct LandscapeSlice {
    std::uint64_t seed = 0;
    int directions = 1;
    std::string normalization;  // "filter" | "none"
    std::vector<double> offsets;
    std::vector<double> values;
    std::vector<std::uint8_t> flagged;  // non-finite evaluations
    double center_value = 0.0;          // value at the zero offset

    std::string to_json() const;
    std::string to_csv() const;
};

struct RobustnessPoint {
    double epsilon = 0.0;
    double accuracy = 0.0;
};

// Structured metrics container emitted as eval.json.
struct EvalReport {
    double accuracy = 0.0;
    double ece = 0.0;
    double mean_energy = 0.0;
    double mean_confidence = 0.0;
    std::size_t sample_count = 0;
    std::vector<RobustnessPoint> robustness;  // optional

    std::string to_json() const;
};

}  // namespace jemlab
