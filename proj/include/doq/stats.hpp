// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "doq/errors.hpp"

namespace doq {

// Five-number summary plus mean, Tukey outliers, and whisker ends.
// Quartiles interpolate linearly between closest ranks; fences sit at
// q1 - 1.5*IQR and q3 + 1.5*IQR; whiskers are the most extreme samples
// inside the fences.
struct BoxStats {
    double minimum = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double maximum = 0.0;
    double mean = 0.0;
    double whisker_low = 0.0;
    double whisker_high = 0.0;
    std::vector<double> outliers; // ascending

    bool operator==(const BoxStats&) const = default;
};

namespace detail {

// Linear interpolation between closest ranks over a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    double h = static_cast<double>(sorted.size() - 1) * q;
    auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

} // namespace detail

inline BoxStats summarize(std::vector<double> samples) {
    if (samples.empty()) throw EmptySamples("summarize: no samples");
    std::sort(samples.begin(), samples.end());

    BoxStats s;
    s.minimum = samples.front();
    s.maximum = samples.back();
    s.q1 = detail::quantile_sorted(samples, 0.25);
    s.median = detail::quantile_sorted(samples, 0.50);
    s.q3 = detail::quantile_sorted(samples, 0.75);

    double sum = 0.0;
    for (double v : samples) sum += v;
    s.mean = sum / static_cast<double>(samples.size());

    double iqr = s.q3 - s.q1;
    double lo_fence = s.q1 - 1.5 * iqr;
    double hi_fence = s.q3 + 1.5 * iqr;
    s.whisker_low = s.maximum;  // tightened below; at least one sample is inside
    s.whisker_high = s.minimum;
    for (double v : samples) {
        if (v < lo_fence || v > hi_fence) {
            s.outliers.push_back(v);
        } else {
            s.whisker_low = std::min(s.whisker_low, v);
            s.whisker_high = std::max(s.whisker_high, v);
        }
    }
    return s;
}

} // namespace doq
