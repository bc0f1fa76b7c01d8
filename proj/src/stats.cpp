#include "qaf/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "qaf/error.hpp"

namespace qaf {

double mean(const std::vector<double>& x) {
    if (x.empty()) throw std::invalid_argument("mean of an empty sample");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double variance(const std::vector<double>& x) {
    const double m = mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / static_cast<double>(x.size());
}

namespace {

void check_pair(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("correlation: vectors differ in length");
    if (x.size() < 2) throw std::invalid_argument("correlation: need at least two points");
}

}  // namespace

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y);
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) throw CorrelationError("correlation undefined: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y);
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const bool ties = std::set<double>(rx.begin(), rx.end()).size() != rx.size() ||
                      std::set<double>(ry.begin(), ry.end()).size() != ry.size();
    if (ties) return pearson(rx, ry);
    const double n = static_cast<double>(x.size());
    double d2 = 0.0;
    for (std::size_t k = 0; k < rx.size(); ++k) d2 += (rx[k] - ry[k]) * (rx[k] - ry[k]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

std::string association_band(double r) {
    const double a = std::abs(r);
    if (a > 0.49) return "strong";
    if (a > 0.29) return "medium";
    if (a > 0.09) return "weak";
    return "none";
}

}  // namespace qaf
