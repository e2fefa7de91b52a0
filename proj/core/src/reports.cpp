#include "jemlab/reports.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace jemlab {

using nlohmann::json;

std::string ReliabilityReport::to_json() const {
    json j;
    j["bins"] = bins;
    j["total"] = total;
    j["ece"] = ece;
    j["bin_lo"] = bin_lo;
    j["bin_hi"] = bin_hi;
    j["mean_confidence"] = mean_confidence;
    j["accuracy"] = accuracy;
    j["count"] = count;
    return j.dump(2);
}

std::string ReliabilityReport::to_csv() const {
    std::ostringstream os;
    os << "bin_lo,bin_hi,count,mean_confidence,accuracy\n";
    for (std::size_t i = 0; i < bins; ++i)
        os << bin_lo[i] << "," << bin_hi[i] << "," << count[i] << "," << mean_confidence[i]
           << "," << accuracy[i] << "\n";
    return os.str();
}

std::string OodReport::to_json() const {
    json j;
    j["method"] = method;
    j["auroc"] = auroc;
    j["in_count"] = in_scores.size();
    j["out_count"] = out_scores.size();
    j["in_scores"] = in_scores;
    j["out_scores"] = out_scores;
    return j.dump(2);
}

std::string OodReport::histogram_csv(std::size_t bins) const {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const double s : in_scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    for (const double s : out_scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    if (!(lo < hi)) hi = lo + 1.0;
    const double width = (hi - lo) / static_cast<double>(bins);
    std::vector<std::size_t> cin(bins, 0), cout(bins, 0);
    const auto bin_of = [&](double s) {
        const auto b = static_cast<std::size_t>((s - lo) / width);
        return std::min(b, bins - 1);
    };
    for (const double s : in_scores) ++cin[bin_of(s)];
    for (const double s : out_scores) ++cout[bin_of(s)];
    std::ostringstream os;
    os << "bin_lo,bin_hi,count_in,count_out\n";
    for (std::size_t i = 0; i < bins; ++i)
        os << lo + width * static_cast<double>(i) << ","
           << lo + width * static_cast<double>(i + 1) << "," << cin[i] << "," << cout[i] << "\n";
    return os.str();
}

std::string LandscapeSlice::to_json() const {
    json j;
    j["seed"] = seed;
    j["directions"] = directions;
    j["normalization"] = normalization;
    j["offsets"] = offsets;
    j["values"] = values;
    j["flagged"] = flagged;
    j["center_value"] = center_value;
    return j.dump(2);
}

std::string LandscapeSlice::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    if (directions == 1) {
        os << "offset,energy\n";
        for (std::size_t i = 0; i < offsets.size(); ++i)
            os << offsets[i] << "," << values[i] << "\n";
    } else {
        os << "offset0,offset1,energy\n";
        const std::size_t n = offsets.size();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < n; ++k)
                os << offsets[i] << "," << offsets[k] << "," << values[i * n + k] << "\n";
    }
    return os.str();
}

std::string EvalReport::to_json() const {
    json j;
    j["accuracy"] = accuracy;
    j["ece"] = ece;
    j["mean_energy"] = mean_energy;
    j["mean_confidence"] = mean_confidence;
    j["sample_count"] = sample_count;
    if (!robustness.empty()) {
        json curve = json::array();
        for (const auto& p : robustness) curve.push_back({{"epsilon", p.epsilon},
                                                          {"accuracy", p.accuracy}});
        j["robustness"] = curve;
    }
    return j.dump(2);
}

}  // namespace jemlab
