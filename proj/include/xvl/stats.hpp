#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "xvl/error.hpp"

namespace xvl::stats {

inline double mean(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double stddev(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

inline double stderr_of_mean(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    return stddev(xs) / std::sqrt(static_cast<double>(xs.size()));
}

struct TTest {
    double mean_diff = 0.0;
    double t = 0.0;
    double p_value = 1.0;
    std::size_t df = 0;
};

/// One-sided paired t-test of H1: mean(a - b) > 0.
inline TTest paired_t_greater(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("paired t-test: samples differ in size");
    if (a.size() < 2) throw Error("paired t-test needs at least two pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    TTest r;
    r.mean_diff = mean(d);
    r.df = d.size() - 1;
    const double se = stderr_of_mean(d);
    if (se == 0.0) {
        r.t = r.mean_diff > 0 ? INFINITY : (r.mean_diff < 0 ? -INFINITY : 0.0);
        r.p_value = r.mean_diff > 0 ? 0.0 : 1.0;
        return r;
    }
    r.t = r.mean_diff / se;
    boost::math::students_t dist(static_cast<double>(r.df));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.t));
    return r;
}

} // namespace xvl::stats
