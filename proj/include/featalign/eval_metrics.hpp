#pragma once

// Reconstruction-loss reports and Frechet distances between Gaussian fits of
// feature sets.

#include "featalign/tensor.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace featalign {

class network;

struct feature_stats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov; ///< unbiased (n - 1)
    std::size_t count = 0;
};

/// Accumulates mean and covariance in one pass (Welford).
class stats_accumulator {
public:
    explicit stats_accumulator(std::size_t dim);
    void add(std::span<const double> row);
    void add_rows(const tensor& batch);
    feature_stats finish() const;
    std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }

private:
    Eigen::VectorXd mean_;
    Eigen::MatrixXd m2_;
    std::size_t n_ = 0;
};

feature_stats compute_stats(const tensor& rows);

/// Square root of a symmetric positive semi-definite matrix. Rejects
/// asymmetric input and eigenvalues below -1e-8; smaller negatives are zeroed.
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m);

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at zero.
double frechet_distance(const feature_stats& a, const feature_stats& b);

/// Stats of a fixed encoder's outputs over `rows`, processed in batches.
feature_stats encoder_feature_stats(const network& encoder, const tensor& rows, std::size_t batch = 256);

/// Per-example squared L2 errors ||x_i - r_i||^2.
std::vector<double> per_example_l2(const tensor& x, const tensor& r);

struct histogram {
    double low = 0.0, high = 0.0;
    std::vector<std::size_t> counts;
    double bin_low(std::size_t i) const;
    double bin_high(std::size_t i) const;
};

histogram make_histogram(std::span<const double> values, std::size_t bins);
std::string histogram_csv(const histogram& h);

struct recon_entry {
    std::string model;
    std::vector<double> l2;         ///< empty when the model has no reconstruction path
    std::optional<double> encoder_fd;
};

struct recon_summary {
    std::string model;
    double mean_l2 = 0.0;
    double median_l2 = 0.0;
    std::optional<double> encoder_fd;
};

double median(std::vector<double> v);

/// Writes `<dir>/recon_summary.csv` and `<dir>/hist_<model>.csv`. Entries
/// without reconstructions are skipped with a warning.
std::vector<recon_summary> recon_loss_report(const std::vector<recon_entry>& entries, const std::string& dir,
                                             std::size_t bins = 30);

} // namespace featalign
