#include "featalign/eval_metrics.hpp"
#include "featalign/feature_alignment.hpp"
#include "featalign/rng.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace featalign;
namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd random_psd(std::size_t n, rng& g, double cond = 1e3)
{
    Eigen::MatrixXd a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = g.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd ev(n);
    for (std::size_t i = 0; i < n; ++i) ev(i) = std::pow(cond, -static_cast<double>(i) / static_cast<double>(n - 1));
    return q * ev.asDiagonal() * q.transpose();
}

feature_stats stats_of(Eigen::VectorXd mean, Eigen::MatrixXd cov)
{
    feature_stats s;
    s.mean = std::move(mean);
    s.cov = std::move(cov);
    s.count = 1000;
    return s;
}

// tr sqrt(S1 S2) from the eigenvalues of the raw (non-symmetric) product.
double frechet_oracle(const feature_stats& a, const feature_stats& b)
{
    const Eigen::MatrixXd p = a.cov * b.cov;
    Eigen::EigenSolver<Eigen::MatrixXd> es(p);
    double tr = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
    return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(MatrixSqrt, Examples)
{
    EXPECT_LT((matrix_sqrt_psd(Eigen::MatrixXd::Identity(3, 3)) - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(),
              1e-15);
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
    d(0, 0) = 4.0;
    d(1, 1) = 9.0;
    const Eigen::MatrixXd s = matrix_sqrt_psd(d);
    EXPECT_NEAR(s(0, 0), 2.0, 1e-14);
    EXPECT_NEAR(s(1, 1), 3.0, 1e-14);
    EXPECT_NEAR(s(0, 1), 0.0, 1e-14);
}

TEST(MatrixSqrt, SquaresBackForWellConditionedInputs)
{
    rng g(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::MatrixXd a = random_psd(8, g, 1e6);
        const Eigen::MatrixXd s = matrix_sqrt_psd(a);
        EXPECT_LT((s * s - a).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    }
}

TEST(MatrixSqrt, Rejections)
{
    Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(2, 2);
    asym(0, 1) = 0.5;
    EXPECT_THROW(matrix_sqrt_psd(asym), std::invalid_argument);
    Eigen::MatrixXd indefinite = Eigen::MatrixXd::Identity(2, 2);
    indefinite(1, 1) = -1.0;
    EXPECT_THROW(matrix_sqrt_psd(indefinite), std::invalid_argument);
    EXPECT_THROW(matrix_sqrt_psd(Eigen::MatrixXd::Zero(2, 3)), std::invalid_argument);
    Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(2, 2);
    tiny(1, 1) = -1e-12;
    EXPECT_NO_THROW(matrix_sqrt_psd(tiny));
}

TEST(FrechetDistance, Examples)
{
    const auto i2 = Eigen::MatrixXd::Identity(2, 2);
    const feature_stats a = stats_of(Eigen::Vector2d(1, 0), i2), b = stats_of(Eigen::Vector2d(0, 0), i2);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-12);
    EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-12);
    const feature_stats c = stats_of(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0));
    const feature_stats d = stats_of(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0));
    EXPECT_NEAR(frechet_distance(c, d), 1.0, 1e-12);
}

TEST(FrechetDistance, AgreesWithRawProductRoute)
{
    rng g(2);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd m1(5), m2(5);
        for (int i = 0; i < 5; ++i) {
            m1(i) = g.normal();
            m2(i) = g.normal();
        }
        const feature_stats a = stats_of(m1, random_psd(5, g)), b = stats_of(m2, random_psd(5, g));
        const double fd = frechet_distance(a, b);
        EXPECT_NEAR(fd, frechet_oracle(a, b), 1e-8);
        EXPECT_NEAR(fd, frechet_distance(b, a), 1e-8);
        EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
        EXPECT_GE(fd, -1e-8);
    }
}

TEST(FrechetDistance, DimensionMismatch)
{
    EXPECT_THROW(frechet_distance(stats_of(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                  stats_of(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3))),
                 std::invalid_argument);
}

TEST(Stats, ConstantRowsHaveZeroCovariance)
{
    const tensor rows = tensor::full({50, 3}, 0.7);
    const feature_stats s = compute_stats(rows);
    EXPECT_EQ(s.count, 50u);
    EXPECT_LT(s.cov.cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_NEAR(s.mean(1), 0.7, 1e-15);
}

TEST(Stats, MatchesTwoPassUnbiasedEstimate)
{
    rng g(3);
    const tensor rows = g.normal_tensor({40, 4}, 2.0);
    const feature_stats s = compute_stats(rows);
    Eigen::MatrixXd m(40, 4);
    for (int i = 0; i < 40; ++i)
        for (int j = 0; j < 4; ++j) m(i, j) = rows[static_cast<std::size_t>(i * 4 + j)];
    const Eigen::RowVectorXd mean = m.colwise().mean();
    const Eigen::MatrixXd centered = m.rowwise() - mean;
    const Eigen::MatrixXd cov = centered.transpose() * centered / 39.0;
    EXPECT_LT((s.mean.transpose() - mean).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((s.cov - cov).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Stats, InterleavingsAgree)
{
    rng g(4);
    const tensor rows = g.normal_tensor({100, 3});
    stats_accumulator forward_order(3), odd_even(3);
    forward_order.add_rows(rows);
    for (std::size_t start : {1u, 0u})
        for (std::size_t i = start; i < 100; i += 2) odd_even.add(rows.values().subspan(i * 3, 3));
    const feature_stats a = forward_order.finish(), b = odd_even.finish();
    EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((a.cov - b.cov).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Stats, StandardNormalCovarianceNearIdentity)
{
    rng g(5);
    const feature_stats s = compute_stats(g.normal_tensor({100000, 4}));
    EXPECT_LT((s.cov - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Stats, NeedsTwoRows)
{
    EXPECT_THROW(compute_stats(tensor({1, 3})), std::invalid_argument);
}

TEST(Stats, EncoderStatsIndependentOfBatching)
{
    const network enc = build_network({"e", {5}, {layer_spec::linear(5, 3), layer_spec::arsinh()}}, 1);
    rng g(6);
    const tensor rows = g.normal_tensor({70, 5});
    const feature_stats a = encoder_feature_stats(enc, rows, 256), b = encoder_feature_stats(enc, rows, 16);
    const feature_stats c = compute_stats(forward(enc, rows));
    EXPECT_LT((a.cov - b.cov).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((a.cov - c.cov).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(a.count, 70u);
}

TEST(PerExampleL2, SquaredErrors)
{
    const auto l2 = per_example_l2(tensor({2, 2}, {1, 2, 3, 4}), tensor({2, 2}, {1, 0, 0, 0}));
    ASSERT_EQ(l2.size(), 2u);
    EXPECT_EQ(l2[0], 4.0);
    EXPECT_EQ(l2[1], 25.0);
}

TEST(Histogram, PerfectReconstructorFillsBinZero)
{
    const std::vector<double> zeros(64, 0.0);
    const histogram h = make_histogram(zeros, 10);
    EXPECT_EQ(h.counts[0], 64u);
    for (std::size_t i = 1; i < h.counts.size(); ++i) EXPECT_EQ(h.counts[i], 0u);
}

TEST(Histogram, BinsCoverTheRange)
{
    const std::vector<double> v{0.0, 0.5, 1.0, 1.0, 2.0};
    const histogram h = make_histogram(v, 4);
    EXPECT_EQ(h.counts, (std::vector<std::size_t>{1, 1, 2, 1}));
    EXPECT_EQ(h.bin_low(0), 0.0);
    EXPECT_EQ(h.bin_high(3), 2.0);
    EXPECT_EQ(histogram_csv(h).rfind("bin_low,bin_high,count\n", 0), 0u);
    EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0, 10.0}), 2.5);
}

TEST(ReconReport, TrainedBeatsUntrainedAndIsDeterministic)
{
    const network_spec spec{"lin8", {8}, {layer_spec::linear(8, 8, false)}, init_kind::gaussian, 0.5};
    const network untrained = build_network(spec, 3);
    network trained = untrained;
    adam_state opt = make_adam(trained.parameters(), {1e-3});
    fa_options o;
    rng data(5), r(6);
    for (int step = 0; step < 500; ++step) fa_train_step(trained, data.normal_tensor({64, 8}), o, opt, r);

    const tensor x = data.normal_tensor({256, 8});
    auto recon_l2 = [&](const network& n) {
        rng rr(7);
        return per_example_l2(x, extract_feature(n, forward(n, x), o.feature, rr).r_hat);
    };
    const std::vector<recon_entry> entries{{"untrained", recon_l2(untrained), 1.5},
                                           {"trained", recon_l2(trained), std::nullopt},
                                           {"no_path", {}, std::nullopt}};
    const fs::path dir = fs::temp_directory_path() / "featalign_test_recon";
    fs::remove_all(dir);
    const auto summary = recon_loss_report(entries, dir.string());
    ASSERT_EQ(summary.size(), 2u);
    EXPECT_LT(summary[1].mean_l2, summary[0].mean_l2);
    const std::string csv = slurp(dir / "recon_summary.csv");
    EXPECT_EQ(csv.rfind("model,mean_l2,median_l2,encoder_fd\n", 0), 0u);
    EXPECT_TRUE(fs::exists(dir / "hist_untrained.csv"));
    EXPECT_TRUE(fs::exists(dir / "hist_trained.csv"));
    EXPECT_FALSE(fs::exists(dir / "hist_no_path.csv"));

    const fs::path again = fs::temp_directory_path() / "featalign_test_recon2";
    fs::remove_all(again);
    const std::vector<recon_entry> rerun{{"untrained", recon_l2(untrained), 1.5},
                                         {"trained", recon_l2(trained), std::nullopt}};
    recon_loss_report(rerun, again.string());
    EXPECT_EQ(slurp(again / "recon_summary.csv"), csv);
    EXPECT_EQ(slurp(again / "hist_trained.csv"), slurp(dir / "hist_trained.csv"));
}
