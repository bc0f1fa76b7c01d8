#pragma once

#include <string>
#include <vector>

namespace qaf {

double mean(const std::vector<double>& x);
/// Population variance.
double variance(const std::vector<double>& x);

/// Throws CorrelationError on zero variance, std::invalid_argument on
/// length mismatch or fewer than two points.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

/// 1-based ranks; tied values share their average rank.
std::vector<double> average_ranks(const std::vector<double>& x);

/// 1 - 6 sum d^2 / (n (n^2 - 1)) without ties. With ties the Pearson
/// coefficient of the average ranks is used, which coincides with the
/// formula in the tie-free case.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// "strong" above 0.49, "medium" above 0.29, "weak" above 0.09, else "none"
/// (on |r|).
std::string association_band(double r);

}  // namespace qaf
