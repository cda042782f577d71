// featalign: train, evaluate and sample feature-alignment models.

#include "featalign/checkpoint.hpp"
#include "featalign/eval_metrics.hpp"
#include "featalign/experiment.hpp"
#include "featalign/grad_suite.hpp"
#include "featalign/image_io.hpp"
#include "featalign/rng.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace featalign;

namespace {

enum exit_code { ok = 0, failure = 1, bad_config = 2, diverged = 3, check_failed = 4 };

struct common_options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, common_options& o, bool config_required = true)
{
    auto* c = cmd->add_option("--config", o.config, "experiment configuration (JSON)");
    if (config_required) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "override the configured seed");
    cmd->add_option("--out", o.out, "output location");
}

std::string read_text(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

experiment_config config_for(const common_options& o, std::optional<int> epochs = std::nullopt, bool out_is_run = false)
{
    config_overrides ov;
    ov.seed = o.seed;
    ov.epochs = epochs;
    if (out_is_run && !o.out.empty()) ov.output_dir = o.out;
    return load_config(o.config, ov);
}

fs::path checkpoint_or_latest(const experiment_config& cfg, const std::string& ckpt)
{
    return ckpt.empty() ? latest_checkpoint(cfg.output_dir) : fs::path(ckpt);
}

int cmd_run(const common_options& o, std::optional<int> epochs)
{
    const experiment_config cfg = config_for(o, epochs, true);
    const run_result r = run_experiment(cfg, read_text(o.config));
    for (const auto& e : r.epochs)
        std::cout << fmt::format("epoch {:3d}  recon_loss {:.6g}  heldout_mse {:.6g}  encoder_fd {:.6g}\n", e.epoch,
                                 e.recon_loss, e.heldout_mse, e.encoder_fd);
    std::cout << "wrote " << r.dir.string() << "\n";
    return ok;
}

int cmd_eval(const common_options& o, const std::string& ckpt, std::size_t bins)
{
    const experiment_config cfg = config_for(o);
    const split_dataset data = load_dataset(cfg);
    const dataset& eval_set = data.holdout.size() ? data.holdout : data.train;
    const network reference = reference_encoder(cfg);
    const std::uint64_t seed = rng::derive(cfg.seed, "eval");
    const auto entry = [&](const std::string& name, const trained_model& m) {
        const tensor r = reconstruct(m, eval_set.x, cfg.inference, seed);
        return recon_entry{name, per_example_l2(eval_set.x, r),
                           frechet_distance(encoder_feature_stats(reference, eval_set.x),
                                            encoder_feature_stats(reference, r))};
    };
    const fs::path path = checkpoint_or_latest(cfg, ckpt);
    const std::vector<recon_entry> entries{entry("untrained", initial_model(cfg)),
                                           entry(path.stem().string(), load_trained(cfg, path))};
    const fs::path dir = o.out.empty() ? cfg.output_dir / "eval" : fs::path(o.out);
    for (const auto& s : recon_loss_report(entries, dir.string(), bins))
        std::cout << fmt::format("{:<12} mean_l2 {:.6g}  median_l2 {:.6g}  encoder-FD {:.6g}\n", s.model, s.mean_l2,
                                 s.median_l2, s.encoder_fd.value_or(NAN));
    std::cout << "wrote " << dir.string() << "\n";
    return ok;
}

int cmd_reconstruct(const common_options& o, const std::string& ckpt, std::size_t count)
{
    const experiment_config cfg = config_for(o);
    const split_dataset data = load_dataset(cfg);
    const dataset& src = data.holdout.size() ? data.holdout : data.train;
    const dataset batch = subset(src, 0, std::min(count, src.size()));
    const trained_model m = load_trained(cfg, checkpoint_or_latest(cfg, ckpt));
    const tensor r = reconstruct(m, batch.x, cfg.inference, rng::derive(cfg.seed, "eval"));
    const shape_t& shape = batch.example_shape;
    if (shape.size() == 3) {
        const fs::path out = o.out.empty() ? cfg.output_dir / (shape[0] == 1 ? "reconstruct.pgm" : "reconstruct.ppm")
                                           : fs::path(o.out);
        const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(batch.size()))));
        emit_pair_grid(r, batch.x, shape, (batch.size() + cols - 1) / cols, cols, out);
        std::cout << "wrote " << out.string() << "\n";
    }
    else {
        const fs::path out = o.out.empty() ? cfg.output_dir / "reconstruct.csv" : fs::path(o.out);
        std::ofstream csv(out);
        const std::size_t d = batch.extent();
        csv << "index,kind";
        for (std::size_t j = 0; j < d; ++j) csv << ",x" << j;
        csv << "\n";
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (const auto& [kind, t] : {std::pair{"reconstruction", &r}, std::pair{"original", &batch.x}}) {
                csv << i << "," << kind;
                for (std::size_t j = 0; j < d; ++j) csv << "," << fmt::format("{}", (*t)[i * d + j]);
                csv << "\n";
            }
        std::cout << "wrote " << out.string() << "\n";
    }
    return ok;
}

int cmd_generate(const common_options& o, const std::string& ckpt, std::size_t count, std::optional<int> label,
                 double class_scale)
{
    const experiment_config cfg = config_for(o);
    if (!cfg.vfa) throw config_error("mode", "generate needs a vfa or vfa-gan model");
    const trained_model m = load_trained(cfg, checkpoint_or_latest(cfg, ckpt));
    generate_options go;
    go.feature = cfg.inference;
    go.label = label;
    go.class_scale = class_scale;
    const tensor samples = generate(*m.vfa, count, cfg.seed, go, m.gan ? &m.gan->generator : nullptr);
    const shape_t& shape = cfg.vfa->trunk.input_shape;
    if (shape.size() == 3) {
        const fs::path out = o.out.empty() ? cfg.output_dir / (shape[0] == 1 ? "generate.pgm" : "generate.ppm")
                                           : fs::path(o.out);
        const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(count))));
        emit_image_grid(samples, shape, (count + cols - 1) / cols, cols, out);
        std::cout << "wrote " << out.string() << "\n";
    }
    else {
        const fs::path out = o.out.empty() ? cfg.output_dir / "generate.csv" : fs::path(o.out);
        std::ofstream csv(out);
        const std::size_t d = samples.extent(1);
        for (std::size_t j = 0; j < d; ++j) csv << (j ? "," : "") << "x" << j;
        csv << "\n";
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t j = 0; j < d; ++j) csv << (j ? "," : "") << fmt::format("{}", samples[i * d + j]);
            csv << "\n";
        }
        std::cout << "wrote " << out.string() << "\n";
    }
    return ok;
}

int cmd_stability(const std::string& out, double w_min, double w_max, std::size_t points, int p_max, double a_hat)
{
    if (points < 2) throw std::invalid_argument("--points must be >= 2");
    std::vector<double> grid(points);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = w_min + (w_max - w_min) * static_cast<double>(i) / static_cast<double>(points - 1);
    const std::string csv = stability_csv(stability_scan(grid, p_max, a_hat));
    if (out.empty())
        std::cout << csv;
    else {
        std::ofstream(out) << csv;
        std::cout << "wrote " << out << "\n";
    }
    return ok;
}

int cmd_grad_check(std::uint64_t seed, std::size_t instances, const std::string& op, double tol)
{
    bool pass = true;
    for (const auto& s : run_grad_suite(seed, instances, op)) {
        const bool good = s.max_error < tol;
        pass = pass && good;
        std::cout << fmt::format("{:<26} {:>3} instances  max rel err {:.3e}  {}\n", s.op, s.instances, s.max_error,
                                 good ? "ok" : "FAIL");
    }
    return pass ? ok : check_failed;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Feature alignment: train encoders whose extracted features reproduce their inputs"};
    app.require_subcommand(1);

    common_options run_o, eval_o, rec_o, gen_o;
    std::optional<int> epochs;
    std::string eval_ckpt, rec_ckpt, gen_ckpt;
    std::size_t bins = 30, rec_count = 32, gen_count = 64;
    std::optional<int> label;
    double class_scale = 1.0;

    auto* run = app.add_subcommand("run", "train per a configuration");
    add_common(run, run_o);
    run->add_option("--epochs", epochs, "override training.epochs")->check(CLI::PositiveNumber);

    auto* eval = app.add_subcommand("eval", "reconstruction-loss histograms and encoder-FD");
    add_common(eval, eval_o);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint (default: latest in output_dir)");
    eval->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);

    auto* rec = app.add_subcommand("reconstruct", "grid of (reconstruction, original) pairs");
    add_common(rec, rec_o);
    rec->add_option("--checkpoint", rec_ckpt, "checkpoint (default: latest in output_dir)");
    rec->add_option("--count", rec_count, "number of examples")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("generate", "sample from a variational model");
    add_common(gen, gen_o);
    gen->add_option("--checkpoint", gen_ckpt, "checkpoint (default: latest in output_dir)");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--label", label, "class for conditional sampling");
    gen->add_option("--class-scale", class_scale, "magnitude of the one-hot class block");

    common_options scan_o;
    double w_min = -2.0, w_max = 2.0, a_hat = 1.0;
    std::size_t points = 81;
    int p_max = 500;
    auto* scan = app.add_subcommand("stability-scan", "convergence of the scalar extraction recurrence over w");
    add_common(scan, scan_o, false);
    scan->add_option("--w-min", w_min, "smallest weight in the grid");
    scan->add_option("--w-max", w_max, "largest weight in the grid");
    scan->add_option("--points", points, "number of grid points");
    scan->add_option("--p-max", p_max, "iterations per weight")->check(CLI::PositiveNumber);
    scan->add_option("--a-hat", a_hat, "target activation");

    common_options gc_o;
    std::size_t instances = 20;
    std::string op;
    double tol = 1e-5;
    auto* gc = app.add_subcommand("grad-check", "finite-difference checks of every differentiable op");
    add_common(gc, gc_o, false);
    gc->add_option("--instances", instances, "random instances per op")->check(CLI::PositiveNumber);
    gc->add_option("--op", op, "check a single op");
    gc->add_option("--tolerance", tol, "maximum relative error");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(run_o, epochs);
        if (*eval) return cmd_eval(eval_o, eval_ckpt, bins);
        if (*rec) return cmd_reconstruct(rec_o, rec_ckpt, rec_count);
        if (*gen) return cmd_generate(gen_o, gen_ckpt, gen_count, label, class_scale);
        if (*scan) return cmd_stability(scan_o.out, w_min, w_max, points, p_max, a_hat);
        if (*gc) return cmd_grad_check(gc_o.seed.value_or(1), instances, op, tol);
    }
    catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return bad_config;
    }
    catch (const numeric_error& e) {
        std::cerr << "numeric error at step " << e.step() << ": " << e.what() << "\n";
        return diverged;
    }
    catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure;
    }
    return ok;
}
