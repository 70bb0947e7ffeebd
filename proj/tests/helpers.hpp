#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xvl/data.hpp"
#include "xvl/params.hpp"
#include "xvl/tensor.hpp"

namespace testutil {

inline xvl::Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0,
                                 double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    xvl::Tensor t(r, c, 0.0);
    for (double& v : t.values()) v = d(rng);
    return t;
}

/// Central differences, written independently of the library's checker.
inline xvl::ParamSet central_difference(const std::function<double(const xvl::ParamSet&)>& f,
                                        const xvl::ParamSet& at, double h = 1e-5) {
    xvl::ParamSet out = at.zeros_like();
    for (std::size_t i = 0; i < at.size(); ++i) {
        xvl::Tensor g = out.entry(i).value;
        for (std::size_t j = 0; j < g.size(); ++j) {
            xvl::ParamSet p = at, m = at;
            xvl::Tensor tp = at.entry(i).value, tm = at.entry(i).value;
            tp[j] += h;
            tm[j] -= h;
            p.set(i, tp);
            m.set(i, tm);
            g[j] = (f(p) - f(m)) / (2.0 * h);
        }
        out.set(i, std::move(g));
    }
    return out;
}

/// max |a-b| / max(|a|,|b|) over coordinates above `floor`.
inline double max_rel(const xvl::ParamSet& a, const xvl::ParamSet& b, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.entry(i).value.size(); ++j) {
            const double x = a.entry(i).value[j], y = b.entry(i).value[j];
            const double s = std::max(std::abs(x), std::abs(y));
            if (s > floor) worst = std::max(worst, std::abs(x - y) / s);
        }
    return worst;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("xvl-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

/// A small benchmark for fast end-to-end tests.
inline xvl::BenchmarkConfig small_benchmark() {
    xvl::BenchmarkConfig c;
    c.train_size = 240;
    c.dev_size = 60;
    c.test_size = 60;
    return c;
}

} // namespace testutil
