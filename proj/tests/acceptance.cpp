// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include "featalign/adversarial.hpp"
#include "featalign/eval_metrics.hpp"
#include "featalign/experiment.hpp"
#include "featalign/feature_alignment.hpp"
#include "featalign/grad_suite.hpp"
#include "featalign/local_fa.hpp"
#include "featalign/rng.hpp"

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

using namespace featalign;
namespace fs = std::filesystem;

namespace {

const fs::path source_dir = FEATALIGN_SOURCE_DIR;

struct outcome {
    bool pass = false;
    std::string detail;
};

struct criterion {
    int id;
    std::string name;
    double time_limit_s;
    std::function<outcome()> check;
};

fs::path work_root;

fs::path fresh_dir(const std::string& name)
{
    const fs::path p = work_root / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

run_result run_config(const std::string& config, const fs::path& out)
{
    const fs::path path = source_dir / "configs" / config;
    const experiment_config cfg = load_config(path, {std::nullopt, out, std::nullopt});
    return run_experiment(cfg, slurp(path));
}

outcome loop_vs_closed_form()
{
    rng g(rng::derive(1, "acceptance:tuples"));
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double w = (2.0 * g.uniform() - 1.0) * std::numbers::sqrt2;
        const double a = 4.0 * g.uniform() - 2.0, r0 = 4.0 * g.uniform() - 2.0;
        const int p = 1 + static_cast<int>(g.below(50));
        worst = std::max(worst, std::abs(iterate_scalar_feature(w, a, r0, p) - closed_form_feature(w, a, r0, p)));
    }
    return {worst < 1e-9, fmt::format("max abs error {:.3e} over 1000 tuples", worst)};
}

outcome limit_behavior()
{
    double worst = 0.0;
    for (double w : {-1.2, -0.9, -0.3, 0.3, 0.9, 1.2})
        worst = std::max(worst, std::abs(iterate_scalar_feature(w, 1.0, 0.0, 500) - 1.0 / w));
    const std::vector<double> grid{1.5};
    const auto rows = stability_scan(grid, 500);
    const bool flagged = rows[0].status == stability::diverged;
    return {worst < 1e-6 && flagged,
            fmt::format("max |r - a/w| {:.3e} at T=500; w=1.5 {}", worst, flagged ? "flagged diverged" : "not flagged")};
}

outcome gradient_suite()
{
    const auto results = run_grad_suite(rng::derive(1, "acceptance:grad"), 20);
    double worst = 0.0;
    std::string worst_op;
    for (const auto& r : results)
        if (r.max_error >= worst) {
            worst = r.max_error;
            worst_op = r.op;
        }
    return {worst < 1e-5, fmt::format("{} ops, worst rel. error {:.3e} ({})", results.size(), worst, worst_op)};
}

double orthogonality_error(const network& net)
{
    const tensor& w = net.layers()[0].weight;
    Eigen::Matrix<double, 8, 8> m;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) m(i, j) = w[static_cast<std::size_t>(i * 8 + j)];
    return (m.transpose() * m - Eigen::Matrix<double, 8, 8>::Identity()).norm();
}

outcome orthogonality(const std::string& curve_path)
{
    const network_spec spec{"orth8", {8}, {layer_spec::linear(8, 8, false)}, init_kind::gaussian, 0.5};
    network net = build_network(spec, rng::derive(1, "acceptance:orth"));
    adam_state opt = make_adam(net.parameters(), {1e-3});
    fa_options o;
    o.feature.steps = 1;
    rng data(rng::derive(1, "acceptance:orth:data")), r(rng::derive(1, "acceptance:orth:r"));
    const double initial = orthogonality_error(net);
    std::ostringstream curve;
    curve << "step,frobenius,ratio\n0," << initial << ",1\n";
    for (int step = 1; step <= 5000; ++step) {
        fa_train_step(net, data.normal_tensor({64, 8}), o, opt, r);
        if (step % 250 == 0) {
            const double e = orthogonality_error(net);
            curve << step << ',' << e << ',' << e / initial << '\n';
        }
    }
    std::cout << curve.str();
    if (!curve_path.empty()) std::ofstream(curve_path) << curve.str();
    const double ratio = orthogonality_error(net) / initial;
    return {ratio <= 0.25, fmt::format("||W^T W - I||_F {:.4f} -> {:.3e} (ratio {:.3e})", initial,
                                       orthogonality_error(net), ratio)};
}

outcome mnist_fa(run_result& keep)
{
    keep = run_config("fa_mnist.json", fresh_dir("fa_a"));
    const auto& last = keep.epochs.back();
    const bool mse_ok = last.heldout_mse < 0.05 && last.heldout_mse < 0.2 * keep.initial_heldout_mse;
    const bool fd_ok = last.encoder_fd < keep.epochs.front().encoder_fd;
    return {mse_ok && fd_ok,
            fmt::format("held-out MSE {:.4f} (untrained {:.4f}, ratio {:.3f}); encoder-FD epoch 1 {:.4f} -> "
                        "epoch {} {:.4f}",
                        last.heldout_mse, keep.initial_heldout_mse, last.heldout_mse / keep.initial_heldout_mse,
                        keep.epochs.front().encoder_fd, last.epoch, last.encoder_fd)};
}

bool single_layer_bit_exact()
{
    const dataset d = load_mnist_idx(source_dir / "data/mnist/npm-images-idx3-ubyte", std::nullopt);
    const network_spec spec{"one", {784}, {layer_spec::linear(784, 64), layer_spec::arsinh()}};
    network a = build_network(spec, 5), b = build_network(spec, 5);
    auto adams = make_local_adams(a, {2e-3});
    adam_state opt = make_adam(b.parameters(), {2e-3});
    fa_options o;
    o.feature.steps = 1;
    rng ra(17), rb(17);
    for (std::size_t step = 0; step < 8; ++step) {
        const tensor x = subset(d, step * 128, 128).x;
        const double la = local_train_step(a, x, o, adams, ra).unit_loss[0];
        const double lb = fa_train_step(b, x, o, opt, rb).recon_loss;
        if (la != lb) return false;
    }
    const auto pa = std::as_const(a).parameters(), pb = std::as_const(b).parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!(*pa[i] == *pb[i])) return false;
    return true;
}

outcome local_fa()
{
    const run_result r = run_config("local_fa_mnist.json", fresh_dir("local_fa"));
    const auto& first = r.epochs.front();
    const auto& last = r.epochs.back();
    bool units_ok = !first.unit_loss.empty();
    std::string units;
    for (std::size_t k = 0; k < first.unit_loss.size(); ++k) {
        units_ok = units_ok && last.unit_loss[k] < first.unit_loss[k];
        units += fmt::format(" C_{} {:.3f}->{:.3f}", k, first.unit_loss[k], last.unit_loss[k]);
    }
    const bool exact = single_layer_bit_exact();
    return {last.heldout_mse < 0.1 && units_ok && exact,
            fmt::format("reconstruction MSE {:.4f};{}; L=1 bit-exact {}", last.heldout_mse, units,
                        exact ? "yes" : "no")};
}

outcome vfa_latents()
{
    const fs::path path = source_dir / "configs/vfa_mnist.json";
    const experiment_config cfg = load_config(path, {std::nullopt, fresh_dir("vfa"), std::nullopt});
    const run_result r = run_experiment(cfg, slurp(path));
    const trained_model m = load_trained(cfg, latest_checkpoint(r.dir));
    const split_dataset data = load_dataset(cfg);
    const encoded e = encode(*m.vfa, data.train.x);
    rng g(rng::derive(cfg.seed, "acceptance:latent"));
    const latent_sample z = reparameterize(e.mu, e.sigma2, g, m.vfa->spec.reparam);
    const feature_stats mu_stats = compute_stats(e.mu);
    const feature_stats z_stats = compute_stats(z.z);
    const double max_mean = mu_stats.mean.cwiseAbs().maxCoeff();
    const double avg_var = z_stats.cov.diagonal().mean();
    return {max_mean < 0.3 && avg_var >= 0.5 && avg_var <= 1.5,
            fmt::format("max |mean(mu)| {:.4f}; mean per-coordinate Var(z) {:.4f} over {} examples", max_mean,
                        avg_var, data.train.size())};
}

outcome adversarial()
{
    const experiment_config cfg =
        load_config(source_dir / "configs/gan_ring.json", {std::nullopt, fresh_dir("gan"), std::nullopt});
    trained_model m = initial_model(cfg);
    const split_dataset data = load_dataset(cfg);
    gan_optimizers opt{make_adam(m.vfa->parameters(), cfg.optimizer),
                       make_adam(m.gan->generator.parameters(), cfg.gan->generator_opt),
                       make_adam(m.gan->discriminator.parameters(), cfg.gan->discriminator_opt)};
    gan_options o;
    o.encoder.fa.feature = cfg.feature;
    o.encoder.fa.target_gradient = cfg.target_gradient;
    o.verify_isolation = true;
    vfa_streams streams(rng::derive(cfg.seed, "vfa"));
    rng pick(rng::derive(cfg.seed, "acceptance:batches"));
    bool finite = true, isolated = true;
    int bad_step = -1;
    for (int step = 0; step < 5000; ++step) {
        std::vector<std::size_t> idx(cfg.batch_size);
        for (auto& i : idx) i = pick.below(data.train.size());
        const auto rep = gan_train_step(*m.vfa, *m.gan, gather_rows(data.train.x, idx), {}, o, opt, streams);
        const bool ok = std::isfinite(rep.encoder_loss) && std::isfinite(rep.generator.total)
                        && std::isfinite(rep.discriminator_loss);
        if (!ok && finite) bad_step = step;
        finite = finite && ok;
        isolated = isolated && rep.isolation_ok;
    }
    const auto scores = score_discriminator(*m.vfa, *m.gan, data.holdout.x, cfg.feature, rng::derive(cfg.seed, "eval"));
    return {finite && isolated && scores.gap() > 0.2,
            fmt::format("losses finite {}{}; isolation {}; mean D(real) {:.3f} - mean D(fake) {:.3f} = {:.3f}",
                        finite ? "yes" : "no", bad_step >= 0 ? fmt::format(" (first bad step {})", bad_step) : "",
                        isolated ? "held" : "violated", scores.real_mean, scores.fake_mean, scores.gap())};
}

outcome metrics()
{
    auto stats = [](Eigen::VectorXd mean, Eigen::MatrixXd cov) {
        feature_stats s;
        s.mean = std::move(mean);
        s.cov = std::move(cov);
        s.count = 100;
        return s;
    };
    const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(2, 2);
    const feature_stats a = stats(Eigen::Vector2d(1, 0), i2), b = stats(Eigen::Vector2d(0, 0), i2);
    double worst = std::abs(frechet_distance(a, a));
    worst = std::max(worst, std::abs(frechet_distance(a, b) - 1.0));
    worst = std::max(worst, std::abs(frechet_distance(stats(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0)),
                                                      stats(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0)))
                                     - 1.0));
    rng g(rng::derive(1, "acceptance:psd"));
    double worst_sq = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd x(6, 6);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) x(i, j) = g.normal();
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(x).householderQ();
        Eigen::VectorXd ev(6);
        for (int i = 0; i < 6; ++i) ev(i) = std::pow(1e6, -i / 5.0);
        const Eigen::MatrixXd psd = q * ev.asDiagonal() * q.transpose();
        const Eigen::MatrixXd s = matrix_sqrt_psd(psd);
        worst_sq = std::max(worst_sq, (s * s - psd).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-8 && worst_sq < 1e-8,
            fmt::format("frechet examples max error {:.3e}; sqrt squaring error {:.3e} (condition 1e6)", worst, worst_sq)};
}

outcome determinism(const run_result& first)
{
    if (first.dir.empty()) return {false, "criterion 5 run unavailable"};
    const run_result second = run_config("fa_mnist.json", fresh_dir("fa_b"));
    bool same = slurp(first.dir / "metrics.csv") == slurp(second.dir / "metrics.csv");
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(first.dir / "checkpoints")) {
        const fs::path other = second.dir / "checkpoints" / e.path().filename();
        same = same && fs::exists(other) && slurp(e.path()) == slurp(other);
        ++compared;
    }
    return {same && compared > 0,
            fmt::format("metrics.csv and {} checkpoints {}", compared, same ? "bit-identical" : "differ")};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"featalign acceptance checks"};
    std::set<int> only;
    std::string curve_path;
    work_root = fs::temp_directory_path() / "featalign_acceptance";
    app.add_option("--only", only, "criterion numbers to run (default: all)")->delimiter(',');
    app.add_option("--curve", curve_path, "write the orthogonality curve CSV here");
    app.add_option("--work", work_root, "scratch directory for run outputs");
    CLI11_PARSE(app, argc, argv);

    run_result fa_run;
    const std::vector<criterion> criteria{
        {1, "loop matches closed form", 5, loop_vs_closed_form},
        {2, "limit behavior", 5, limit_behavior},
        {3, "gradient suite", 30, gradient_suite},
        {4, "orthogonality emergence", 120, [&] { return orthogonality(curve_path); }},
        {5, "MNIST desk-scale reconstruction", 1200, [&] { return mnist_fa(fa_run); }},
        {6, "local feature alignment", 1200, local_fa},
        {7, "VFA latent statistics", 1500, vfa_latents},
        {8, "adversarial smoke test", 300, adversarial},
        {9, "metric examples", 1, metrics},
        {10, "determinism", 2400, [&] { return determinism(fa_run); }},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.contains(c.id)) continue;
        if (c.id == 10 && fa_run.dir.empty() && (only.empty() || !only.contains(5))) {
            fa_run = run_config("fa_mnist.json", fresh_dir("fa_a"));
        }
        const auto t0 = std::chrono::steady_clock::now();
        outcome o;
        try {
            o = c.check();
        }
        catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= c.time_limit_s;
        const bool pass = o.pass && in_time;
        if (!pass) ++failures;
        std::cout << fmt::format("{} criterion {}: {}: {} [{:.1f} s, limit {:.0f} s{}]", pass ? "PASS" : "FAIL", c.id,
                                 c.name, o.detail, secs, c.time_limit_s, in_time ? "" : ", exceeded")
                  << std::endl;
    }
    std::cout << (failures ? fmt::format("{} criteria failed", failures) : std::string("all criteria passed"))
              << std::endl;
    return failures ? 1 : 0;
}
