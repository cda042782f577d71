#include "featalign/eval_metrics.hpp"

#include "featalign/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace featalign {

stats_accumulator::stats_accumulator(std::size_t dim)
    : mean_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
      m2_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim)))
{
    if (dim == 0) throw std::invalid_argument("stats_accumulator: dimension must be positive");
}

void stats_accumulator::add(std::span<const double> row)
{
    if (row.size() != dim()) throw shape_error(fmt::format("stats_accumulator: row of {} vs {}", row.size(), dim()));
    Eigen::Map<const Eigen::VectorXd> x(row.data(), static_cast<Eigen::Index>(row.size()));
    ++n_;
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_.noalias() += delta * (x - mean_).transpose();
}

void stats_accumulator::add_rows(const tensor& batch)
{
    if (batch.rank() != 2) throw shape_error("stats_accumulator: expected [N x D], got " + shape_str(batch.shape()));
    const std::size_t d = batch.extent(1);
    for (std::size_t i = 0; i < batch.extent(0); ++i) add(batch.values().subspan(i * d, d));
}

feature_stats stats_accumulator::finish() const
{
    if (n_ < 2) throw std::invalid_argument("stats_accumulator: need at least two rows");
    Eigen::MatrixXd cov = m2_ / static_cast<double>(n_ - 1);
    cov = 0.5 * (cov + cov.transpose());
    return {mean_, cov, n_};
}

feature_stats compute_stats(const tensor& rows)
{
    if (rows.rank() != 2) throw shape_error("compute_stats: expected [N x D], got " + shape_str(rows.shape()));
    stats_accumulator acc(rows.extent(1));
    acc.add_rows(rows);
    return acc.finish();
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m)
{
    if (m.rows() != m.cols()) throw shape_error("matrix_sqrt_psd: matrix is not square");
    const double tol = 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol)
        throw std::invalid_argument("matrix_sqrt_psd: matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw std::runtime_error("matrix_sqrt_psd: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    if (ev.size() && ev.minCoeff() < -1e-8)
        throw std::invalid_argument(fmt::format("matrix_sqrt_psd: eigenvalue {} is negative", ev.minCoeff()));
    ev = ev.cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const feature_stats& a, const feature_stats& b)
{
    if (a.mean.size() != b.mean.size())
        throw shape_error(fmt::format("frechet_distance: dimensions {} vs {}", a.mean.size(), b.mean.size()));
    const auto dim = static_cast<std::size_t>(a.mean.size());
    if (a.count < dim + 1 || b.count < dim + 1)
        std::clog << fmt::format("warning: frechet_distance: {} and {} samples for dimension {}; covariance is singular\n",
                                 a.count, b.count, dim);
    const Eigen::MatrixXd s1 = matrix_sqrt_psd(a.cov);
    Eigen::MatrixXd inner = s1 * b.cov * s1;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if (d < 0.0) {
        if (d < -1e-6) std::clog << fmt::format("warning: frechet_distance: clamped {} to zero\n", d);
        return 0.0;
    }
    return d;
}

feature_stats encoder_feature_stats(const network& encoder, const tensor& rows, std::size_t batch)
{
    if (rows.rank() != 2 || rows.extent(1) != encoder.input_size())
        throw shape_error("encoder_feature_stats: rows " + shape_str(rows.shape()) + " do not match the encoder");
    if (batch == 0) throw std::invalid_argument("encoder_feature_stats: batch must be positive");
    stats_accumulator acc(encoder.output_size());
    const std::size_t n = rows.extent(0), d = rows.extent(1);
    for (std::size_t i = 0; i < n; i += batch) {
        const std::size_t m = std::min(batch, n - i);
        auto v = rows.values().subspan(i * d, m * d);
        acc.add_rows(forward(encoder, tensor({m, d}, {v.begin(), v.end()})));
    }
    return acc.finish();
}

std::vector<double> per_example_l2(const tensor& x, const tensor& r)
{
    if (x.shape() != r.shape() || x.rank() != 2)
        throw shape_error("per_example_l2: " + shape_str(x.shape()) + " vs " + shape_str(r.shape()));
    const std::size_t n = x.extent(0), d = x.extent(1);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double e = x[i * d + j] - r[i * d + j];
            s += e * e;
        }
        out[i] = s;
    }
    return out;
}

double histogram::bin_low(std::size_t i) const
{
    return low + (high - low) * static_cast<double>(i) / static_cast<double>(counts.size());
}

double histogram::bin_high(std::size_t i) const { return bin_low(i + 1); }

histogram make_histogram(std::span<const double> values, std::size_t bins)
{
    if (bins == 0) throw std::invalid_argument("make_histogram: bins must be positive");
    if (values.empty()) throw std::invalid_argument("make_histogram: no values");
    histogram h;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    h.low = *lo;
    h.high = *hi > *lo ? *hi : *lo + 1.0;
    h.counts.assign(bins, 0);
    for (double v : values) {
        auto b = static_cast<std::size_t>((v - h.low) / (h.high - h.low) * static_cast<double>(bins));
        ++h.counts[std::min(b, bins - 1)];
    }
    return h;
}

std::string histogram_csv(const histogram& h)
{
    std::string s = "bin_low,bin_high,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        s += fmt::format("{},{},{}\n", h.bin_low(i), h.bin_high(i), h.counts[i]);
    return s;
}

double median(std::vector<double> v)
{
    if (v.empty()) throw std::invalid_argument("median: no values");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

std::vector<recon_summary> recon_loss_report(const std::vector<recon_entry>& entries, const std::string& dir,
                                             std::size_t bins)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<recon_summary> out;
    std::ofstream csv(fs::path(dir) / "recon_summary.csv");
    if (!csv) throw std::runtime_error("recon_loss_report: cannot write to " + dir);
    csv << "model,mean_l2,median_l2,encoder_fd\n";
    for (const auto& e : entries) {
        if (e.l2.empty()) {
            std::clog << "warning: " << e.model << " has no reconstruction path; skipped\n";
            continue;
        }
        recon_summary s{e.model, std::accumulate(e.l2.begin(), e.l2.end(), 0.0) / static_cast<double>(e.l2.size()),
                        median(e.l2), e.encoder_fd};
        csv << fmt::format("{},{},{},{}\n", s.model, s.mean_l2, s.median_l2,
                           s.encoder_fd ? fmt::format("{}", *s.encoder_fd) : std::string());
        std::ofstream hist(fs::path(dir) / ("hist_" + e.model + ".csv"));
        hist << histogram_csv(make_histogram(e.l2, bins));
        out.push_back(s);
    }
    return out;
}

} // namespace featalign
