#include "featalign/experiment.hpp"

#include "featalign/checkpoint.hpp"
#include "featalign/eval_metrics.hpp"
#include "featalign/image_io.hpp"
#include "featalign/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

namespace featalign {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(run_mode m)
{
    switch (m) {
    case run_mode::fa: return "fa";
    case run_mode::vfa: return "vfa";
    case run_mode::vfa_gan: return "vfa-gan";
    case run_mode::local_fa: return "local-fa";
    }
    return "?";
}

namespace {

// Reads fields of one JSON object and rejects keys nobody asked for.
class reader {
public:
    reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix))
    {
        if (!j_.is_object()) throw config_error(prefix_.empty() ? "<root>" : prefix_, "expected an object");
    }

    std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    T req(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) throw config_error(path(key), "missing");
        return get<T>(key);
    }

    template <class T>
    T opt(const std::string& key, T fallback)
    {
        used_.insert(key);
        return j_.contains(key) ? get<T>(key) : fallback;
    }

    reader sub(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) throw config_error(path(key), "missing");
        return {j_.at(key), path(key)};
    }

    const json& raw(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) throw config_error(path(key), "missing");
        return j_.at(key);
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw config_error(path(k), "unknown field");
    }

private:
    template <class T>
    T get(const std::string& key) const
    {
        try {
            return j_.at(key).get<T>();
        }
        catch (const json::exception&) {
            throw config_error(path(key), "wrong type (" + std::string(j_.at(key).type_name()) + ")");
        }
    }

    const json& j_;
    std::string prefix_;
    std::set<std::string> used_;
};

run_mode parse_mode(const std::string& s, const std::string& field)
{
    if (s == "fa") return run_mode::fa;
    if (s == "vfa") return run_mode::vfa;
    if (s == "vfa-gan") return run_mode::vfa_gan;
    if (s == "local-fa") return run_mode::local_fa;
    throw config_error(field, "unknown mode '" + s + "' (fa, vfa, vfa-gan, local-fa)");
}

bool is_variational(run_mode m) { return m == run_mode::vfa || m == run_mode::vfa_gan; }

feature_config parse_feature(reader r, bool require_core)
{
    feature_config f;
    f.tau = require_core ? r.req<double>("tau") : r.opt<double>("tau", f.tau);
    f.steps = require_core ? r.req<int>("steps") : r.opt<int>("steps", f.steps);
    const auto init = r.opt<std::string>("r_init", "gaussian");
    if (init == "zeros")
        f.r_init = r_init_kind::zeros;
    else if (init == "gaussian")
        f.r_init = r_init_kind::gaussian;
    else
        throw config_error(r.path("r_init"), "expected zeros or gaussian");
    f.r_init_std = r.opt<double>("r_init_std", f.r_init_std);
    r.finish();
    try {
        f.validate();
    }
    catch (const std::invalid_argument& e) {
        throw config_error(r.path("steps"), e.what());
    }
    return f;
}

adam_settings parse_adam(reader r)
{
    adam_settings a;
    a.lr = r.req<double>("lr");
    a.beta1 = r.opt<double>("beta1", a.beta1);
    a.beta2 = r.opt<double>("beta2", a.beta2);
    a.eps = r.opt<double>("eps", a.eps);
    r.finish();
    if (!(a.lr > 0.0)) throw config_error(r.path("lr"), "must be > 0");
    if (!(a.beta1 >= 0.0 && a.beta1 < 1.0)) throw config_error(r.path("beta1"), "must be in [0, 1)");
    if (!(a.beta2 >= 0.0 && a.beta2 < 1.0)) throw config_error(r.path("beta2"), "must be in [0, 1)");
    if (!(a.eps > 0.0)) throw config_error(r.path("eps"), "must be > 0");
    return a;
}

template <class F>
auto parse_spec(const json& j, const std::string& field, F&& f)
{
    try {
        return f(j);
    }
    catch (const std::exception& e) {
        throw config_error(field, e.what());
    }
}

fs::path resolve_path(const std::string& value, const fs::path& base_dir, const std::string& field)
{
    const fs::path p(value);
    if (p.is_absolute()) {
        if (!fs::exists(p)) throw config_error(field, "'" + value + "' does not exist");
        return p;
    }
    if (fs::exists(base_dir / p)) return base_dir / p;
    if (const char* root = std::getenv("FEATALIGN_DATA"); root && *root && fs::exists(fs::path(root) / p))
        return fs::path(root) / p;
    throw config_error(field, "'" + value + "' not found relative to " + base_dir.string() + " or $FEATALIGN_DATA");
}

json mnist_network(std::size_t hidden, std::size_t out, const json& activation)
{
    json layers = json::array();
    layers.push_back({{"kind", "linear"}, {"in", 784}, {"out", hidden}});
    layers.push_back(activation);
    layers.push_back({{"kind", "linear"}, {"in", hidden}, {"out", out}});
    return {{"name", "encoder"}, {"input_shape", {784}}, {"layers", layers}};
}

} // namespace

json preset_json(const std::string& name, run_mode mode)
{
    std::size_t train = 0, holdout = 0, hidden = 0, out = 0;
    if (name == "mnist-desk") {
        train = 8192, holdout = 1808, hidden = 256, out = 64;
    }
    else if (name == "mnist-full") {
        train = 50000, holdout = 10000, hidden = 512, out = 128;
    }
    else
        throw config_error("preset", "unknown preset '" + name + "' (mnist-desk, mnist-full)");
    const json leaky{{"kind", "leaky_relu"}, {"slope", 0.01}};
    const json asinh{{"kind", "arsinh"}};
    json p{{"dataset", {{"kind", "mnist"}, {"train", train}, {"holdout", holdout}}},
           {"training", {{"batch_size", 128}}},
           {"optimizer", {{"lr", 2e-3}}}};
    switch (mode) {
    case run_mode::fa: p["architecture"] = mnist_network(hidden, out, leaky); break;
    case run_mode::local_fa: p["architecture"] = mnist_network(hidden, out, asinh); break;
    case run_mode::vfa:
    case run_mode::vfa_gan: {
        json trunk = mnist_network(hidden, out, leaky);
        trunk["name"] = "trunk";
        trunk["layers"].erase(2);
        p["architecture"] = {{"trunk", trunk}, {"latent", out}, {"reparam", "variance"}};
        p["training"]["target_gradient"] = true;
        break;
    }
    }
    return p;
}

experiment_config parse_config(const json& input, const fs::path& base_dir, const config_overrides& overrides)
{
    if (!input.is_object()) throw config_error("<root>", "expected an object");
    json j = input;
    if (overrides.seed) j["seed"] = *overrides.seed;
    if (overrides.output_dir) j["output_dir"] = overrides.output_dir->string();
    if (overrides.epochs) j["training"]["epochs"] = *overrides.epochs;

    experiment_config c;
    {
        reader top(j, "");
        c.mode = parse_mode(top.req<std::string>("mode"), "mode");
        c.preset = top.opt<std::string>("preset", "");
    }
    if (!c.preset.empty()) {
        json merged = preset_json(c.preset, c.mode);
        merged.merge_patch(j);
        j = std::move(merged);
    }
    c.resolved = j;

    reader top(j, "");
    top.req<std::string>("mode");
    top.opt<std::string>("preset", "");
    c.seed = top.req<std::uint64_t>("seed");
    c.output_dir = top.req<std::string>("output_dir");
    if (c.output_dir.empty()) throw config_error("output_dir", "must not be empty");
    c.grid_count = top.opt<std::size_t>("grid_count", c.grid_count);

    {
        reader d = top.sub("dataset");
        const auto kind = d.req<std::string>("kind");
        if (kind == "mnist") {
            c.dataset.kind = dataset_kind::mnist;
            c.dataset.images = resolve_path(d.req<std::string>("images"), base_dir, d.path("images"));
            if (d.has("labels"))
                c.dataset.labels = resolve_path(d.req<std::string>("labels"), base_dir, d.path("labels"));
        }
        else if (kind == "image-folder") {
            c.dataset.kind = dataset_kind::image_folder;
            c.dataset.folder = resolve_path(d.req<std::string>("path"), base_dir, d.path("path"));
        }
        else if (kind == "synthetic-gaussians") {
            c.dataset.kind = dataset_kind::synthetic;
            c.dataset.synthetic = d.req<std::string>("shape");
            if (c.dataset.synthetic != "ring" && c.dataset.synthetic != "gaussian" && c.dataset.synthetic != "mixed")
                throw config_error(d.path("shape"), "expected ring, gaussian or mixed");
            c.dataset.synthetic_n = d.req<std::size_t>("n");
            if (c.dataset.synthetic_n == 0) throw config_error(d.path("n"), "must be >= 1");
            c.dataset.synthetic_dim = d.opt<std::size_t>("dim", 2);
        }
        else
            throw config_error(d.path("kind"), "unknown dataset '" + kind + "' (mnist, synthetic-gaussians, image-folder)");
        c.dataset.train = d.opt<std::size_t>("train", 0);
        c.dataset.holdout = d.opt<std::size_t>("holdout", 0);
        d.finish();
    }

    {
        const json& arch = top.raw("architecture");
        if (is_variational(c.mode)) {
            c.vfa = parse_spec(arch, "architecture", vfa_spec_from_json);
            parse_spec(arch, "architecture.trunk", [](const json& a) { return chain_shapes(network_spec_from_json(a.at("trunk"))); });
            if (c.vfa->latent == 0) throw config_error("architecture.latent", "must be >= 1");
        }
        else {
            c.network = parse_spec(arch, "architecture", network_spec_from_json);
            parse_spec(arch, "architecture", [&](const json&) { return chain_shapes(c.network); });
            if (c.mode == run_mode::local_fa) parse_spec(arch, "architecture", [&](const json&) {
                require_invertible(build_network(c.network, 0));
                return 0;
            });
        }
    }

    c.feature = parse_feature(top.sub("feature"), true);
    c.inference = top.has("inference") ? parse_feature(top.sub("inference"), true) : c.feature;
    c.optimizer = parse_adam(top.sub("optimizer"));

    {
        reader t = top.sub("training");
        c.epochs = t.req<int>("epochs");
        if (c.epochs < 1) throw config_error(t.path("epochs"), "must be >= 1");
        c.batch_size = t.req<std::size_t>("batch_size");
        if (c.batch_size == 0) throw config_error(t.path("batch_size"), "must be >= 1");
        const auto path = t.opt<std::string>("gradient_path", "unrolled");
        if (path == "unrolled")
            c.path = gradient_path::unrolled;
        else if (path == "truncated")
            c.path = gradient_path::truncated;
        else
            throw config_error(t.path("gradient_path"), "expected unrolled or truncated");
        c.target_gradient = t.opt<bool>("target_gradient", false);
        t.finish();
    }

    if (is_variational(c.mode)) {
        reader b = top.sub("beta");
        const auto mode = b.req<std::string>("mode");
        if (mode == "uniform")
            c.beta = beta_mode::uniform;
        else if (mode == "fixed") {
            c.beta = beta_mode::fixed;
            c.beta_value = b.req<double>("value");
            if (!(c.beta_value >= 0.0)) throw config_error(b.path("value"), "must be >= 0");
        }
        else
            throw config_error(b.path("mode"), "expected uniform or fixed");
        b.finish();
    }
    else if (top.has("beta"))
        throw config_error("beta", "only meaningful in vfa and vfa-gan modes");

    if (c.mode == run_mode::vfa_gan) {
        reader g = top.sub("gan");
        gan_config gc;
        gc.generator = parse_spec(g.raw("generator"), g.path("generator"), network_spec_from_json);
        gc.discriminator = parse_spec(g.raw("discriminator"), g.path("discriminator"), network_spec_from_json);
        gc.lambda = g.req<double>("lambda");
        if (!(gc.lambda >= 0.0)) throw config_error(g.path("lambda"), "must be >= 0");
        gc.generator_opt = parse_adam(g.sub("generator_optimizer"));
        gc.discriminator_opt = parse_adam(g.sub("discriminator_optimizer"));
        g.finish();
        c.gan = std::move(gc);
    }
    else if (top.has("gan"))
        throw config_error("gan", "only meaningful in vfa-gan mode");

    top.opt<json>("inference", {});
    top.finish();

    const std::size_t need = is_variational(c.mode) ? shape_size(c.vfa->trunk.input_shape)
                                                     : shape_size(c.network.input_shape);
    if (c.gan) {
        parse_spec(j["gan"]["generator"], "gan.generator", [&](const json&) {
            gan_bundle b{build_network(c.gan->generator, 0), build_network(c.gan->discriminator, 0), c.gan->lambda};
            validate_bundle(b, need);
            return 0;
        });
    }
    if (c.vfa && c.vfa->classes > 0 && c.dataset.kind == dataset_kind::mnist && !c.dataset.labels)
        throw config_error("dataset.labels", "a class head needs labels");
    return c;
}

experiment_config load_config(const fs::path& path, const config_overrides& overrides)
{
    std::ifstream in(path);
    if (!in) throw config_error("--config", "cannot read " + path.string());
    json j;
    try {
        j = json::parse(in);
    }
    catch (const json::parse_error& e) {
        throw config_error("--config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path(), overrides);
}

split_dataset load_dataset(const experiment_config& cfg)
{
    dataset all;
    switch (cfg.dataset.kind) {
    case dataset_kind::mnist: all = load_mnist_idx(cfg.dataset.images, cfg.dataset.labels); break;
    case dataset_kind::image_folder: all = load_image_folder(cfg.dataset.folder); break;
    case dataset_kind::synthetic:
        all = synthetic_dataset(cfg.dataset.synthetic, cfg.dataset.synthetic_n, cfg.seed, cfg.dataset.synthetic_dim);
        break;
    }
    const std::size_t holdout = cfg.dataset.holdout;
    if (holdout >= all.size())
        throw config_error("dataset.holdout", fmt::format("{} leaves no training data out of {}", holdout, all.size()));
    const std::size_t train = cfg.dataset.train ? cfg.dataset.train : all.size() - holdout;
    if (train + holdout > all.size())
        throw config_error("dataset.train",
                           fmt::format("{} + {} held out exceeds the {} available examples", train, holdout, all.size()));
    const std::size_t need = cfg.vfa ? shape_size(cfg.vfa->trunk.input_shape) : shape_size(cfg.network.input_shape);
    if (all.extent() != need)
        throw config_error("architecture", fmt::format("input extent {} does not match the dataset's {}", need,
                                                       all.extent()));
    if (cfg.vfa && cfg.vfa->classes > 0) {
        if (!all.has_labels()) throw config_error("architecture.classes", "the dataset has no labels");
        if (all.class_count > cfg.vfa->classes)
            throw config_error("architecture.classes", fmt::format("dataset has {} classes", all.class_count));
    }
    return {subset(all, 0, train), subset(all, train, holdout)};
}

std::size_t trained_model::input_size() const { return vfa ? vfa->input_size() : net.input_size(); }

trained_model initial_model(const experiment_config& cfg)
{
    trained_model m;
    m.mode = cfg.mode;
    const std::uint64_t seed = rng::derive(cfg.seed, "model");
    if (cfg.vfa)
        m.vfa = build_vfa(*cfg.vfa, seed);
    else
        m.net = build_network(cfg.network, seed);
    if (cfg.gan)
        m.gan = gan_bundle{build_network(cfg.gan->generator, rng::derive(cfg.seed, "generator")),
                           build_network(cfg.gan->discriminator, rng::derive(cfg.seed, "discriminator")),
                           cfg.gan->lambda};
    return m;
}

network reference_encoder(const experiment_config& cfg)
{
    const std::uint64_t seed = rng::derive(cfg.seed, "reference");
    return cfg.vfa ? build_network(cfg.vfa->trunk, seed) : build_network(cfg.network, seed);
}

tensor reconstruct(const trained_model& m, const tensor& x, const feature_config& cfg, std::uint64_t seed)
{
    rng r_init(rng::derive(seed, "reconstruct"));
    switch (m.mode) {
    case run_mode::fa: return extract_feature(m.net, forward(m.net, x), cfg, r_init).r_hat;
    case run_mode::local_fa: return local_reconstruct(m.net, forward(m.net, x), cfg);
    case run_mode::vfa:
    case run_mode::vfa_gan: {
        const encoded e = encode(*m.vfa, x);
        tensor target = e.mu;
        if (m.vfa->class_head) {
            tape t;
            target = concat_cols(t.constant(e.mu), t.constant(e.logits)).value();
        }
        tensor r = features_from_latent(*m.vfa, target, cfg, r_init);
        return m.gan ? forward(m.gan->generator, r) : r;
    }
    }
    throw std::logic_error("reconstruct: unknown mode");
}

eval_metrics_row evaluate(const trained_model& m, const network& reference, const tensor& x, const feature_config& cfg,
                          std::uint64_t seed)
{
    const tensor r = reconstruct(m, x, cfg, seed);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = x[i] - r[i];
        s += e * e;
    }
    eval_metrics_row row;
    row.heldout_mse = s / static_cast<double>(x.size());
    if (!std::isfinite(row.heldout_mse)) throw numeric_error("evaluate: non-finite reconstruction", 0);
    row.encoder_fd = frechet_distance(encoder_feature_stats(reference, x), encoder_feature_stats(reference, r));
    return row;
}

fs::path checkpoint_path(const fs::path& run_dir, int epoch, const std::string& part)
{
    return run_dir / "checkpoints" / fmt::format("epoch_{:03}{}.faln", epoch, part.empty() ? "" : "_" + part);
}

fs::path latest_checkpoint(const fs::path& run_dir)
{
    const fs::path dir = run_dir / "checkpoints";
    if (!fs::is_directory(dir)) throw std::runtime_error("no checkpoints under " + run_dir.string());
    fs::path best;
    long best_epoch = -1;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (!name.starts_with("epoch_") || !name.ends_with(".faln")) continue;
        const std::string digits = name.substr(6, name.size() - 11);
        if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); }))
            continue;
        const long epoch = std::stol(digits);
        if (epoch > best_epoch) {
            best_epoch = epoch;
            best = e.path();
        }
    }
    if (best.empty()) throw std::runtime_error("no checkpoints under " + run_dir.string());
    return best;
}

namespace {

json vfa_architecture(const vfa_spec& s) { return {{"vfa", to_json(s)}}; }

fs::path sibling(const fs::path& encoder_ckpt, const std::string& part)
{
    fs::path p = encoder_ckpt;
    p.replace_filename(encoder_ckpt.stem().string() + "_" + part + ".faln");
    return p;
}

// Adam moments of several contiguous parameter groups as one state.
adam_state merge_adams(const std::vector<adam_state>& parts)
{
    adam_state s = parts.front();
    s.m.clear();
    s.v.clear();
    for (const auto& p : parts) {
        s.m.insert(s.m.end(), p.m.begin(), p.m.end());
        s.v.insert(s.v.end(), p.v.begin(), p.v.end());
    }
    return s;
}

std::string format_row(const std::vector<double>& values)
{
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + fmt::format("{}", values[i]);
    return s;
}

bool image_shaped(const shape_t& s) { return s.size() == 3 && (s[0] == 1 || s[0] == 3); }

} // namespace

trained_model load_trained(const experiment_config& cfg, const fs::path& ckpt)
{
    trained_model m = initial_model(cfg);
    if (m.vfa) {
        adam_state a = make_adam(m.vfa->parameters(), cfg.optimizer);
        load_checkpoint_into(ckpt, vfa_architecture(*cfg.vfa), m.vfa->parameters(), a);
    }
    else {
        adam_state a = make_adam(m.net.parameters(), cfg.optimizer);
        load_checkpoint_into(ckpt, to_json(cfg.network), m.net.parameters(), a);
    }
    if (m.gan) {
        adam_state g = make_adam(m.gan->generator.parameters(), cfg.gan->generator_opt);
        load_checkpoint_into(sibling(ckpt, "generator"), to_json(cfg.gan->generator), m.gan->generator.parameters(), g);
        adam_state d = make_adam(m.gan->discriminator.parameters(), cfg.gan->discriminator_opt);
        load_checkpoint_into(sibling(ckpt, "discriminator"), to_json(cfg.gan->discriminator),
                             m.gan->discriminator.parameters(), d);
    }
    return m;
}

run_result run_experiment(const experiment_config& cfg, const std::string& config_text)
{
    const split_dataset data = load_dataset(cfg);
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir / "checkpoints");
    {
        std::ofstream(dir / "config.json", std::ios::binary) << config_text;
        std::ofstream(dir / "resolved_config.json") << cfg.resolved.dump(2) << "\n";
    }

    trained_model model = initial_model(cfg);
    const network reference = reference_encoder(cfg);
    const dataset& eval_set = data.holdout.size() ? data.holdout : data.train;
    const tensor eval_x = subset(eval_set, 0, std::min<std::size_t>(eval_set.size(), 2048)).x;
    const std::uint64_t eval_seed = rng::derive(cfg.seed, "eval");

    fa_options fa;
    fa.feature = cfg.feature;
    fa.path = cfg.path;
    fa.target_gradient = cfg.target_gradient;
    vfa_options vo;
    vo.fa = fa;
    vo.beta = cfg.beta;
    vo.beta_value = cfg.beta_value;

    adam_state adam;
    std::vector<adam_state> local_adams;
    gan_optimizers gan_opt;
    switch (cfg.mode) {
    case run_mode::fa: adam = make_adam(model.net.parameters(), cfg.optimizer); break;
    case run_mode::local_fa: local_adams = make_local_adams(model.net, cfg.optimizer); break;
    case run_mode::vfa: adam = make_adam(model.vfa->parameters(), cfg.optimizer); break;
    case run_mode::vfa_gan:
        gan_opt = {make_adam(model.vfa->parameters(), cfg.optimizer),
                   make_adam(model.gan->generator.parameters(), cfg.gan->generator_opt),
                   make_adam(model.gan->discriminator.parameters(), cfg.gan->discriminator_opt)};
        break;
    }

    rng shuffle(rng::derive(cfg.seed, "shuffle"));
    rng r_stream(rng::derive(cfg.seed, "r_init"));
    vfa_streams streams(rng::derive(cfg.seed, "vfa"));

    run_result result;
    result.dir = dir;
    {
        const eval_metrics_row init = evaluate(model, reference, eval_x, cfg.inference, eval_seed);
        result.initial_heldout_mse = init.heldout_mse;
        result.initial_encoder_fd = init.encoder_fd;
    }

    std::vector<std::string> columns{"epoch", "recon_loss", "heldout_mse", "encoder_fd"};
    const std::size_t units = cfg.mode == run_mode::local_fa ? local_units(model.net).size() : 0;
    for (std::size_t u = 0; u < units; ++u) columns.push_back(fmt::format("unit_loss_{}", u));
    if (is_variational(cfg.mode)) columns.insert(columns.end(), {"kl", "beta_mean"});
    if (cfg.mode == run_mode::vfa_gan) columns.insert(columns.end(), {"g_loss", "d_loss"});
    std::ofstream metrics(dir / "metrics.csv");
    if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    for (std::size_t i = 0; i < columns.size(); ++i) metrics << (i ? "," : "") << columns[i];
    metrics << "\n";

    const std::size_t n = data.train.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    long global_step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        epoch_metrics em;
        em.epoch = epoch;
        em.unit_loss.assign(units, 0.0);
        std::size_t batches = 0;
        for (std::size_t b = 0; b < n; b += cfg.batch_size, ++global_step, ++batches) {
            const std::span<const std::size_t> idx(order.data() + b, std::min(cfg.batch_size, n - b));
            const tensor x = gather_rows(data.train.x, idx);
            const std::vector<int> labels =
                model.vfa && model.vfa->class_head ? gather_labels(data.train.labels, idx) : std::vector<int>{};
            try {
                switch (cfg.mode) {
                case run_mode::fa: em.recon_loss += fa_train_step(model.net, x, fa, adam, r_stream).recon_loss; break;
                case run_mode::local_fa: {
                    const auto rep = local_train_step(model.net, x, fa, local_adams, r_stream);
                    em.recon_loss += rep.unit_loss.front();
                    for (std::size_t u = 0; u < units; ++u) em.unit_loss[u] += rep.unit_loss[u];
                    break;
                }
                case run_mode::vfa: {
                    const auto rep = vfa_train_step(*model.vfa, x, labels, vo, adam, streams);
                    em.recon_loss += rep.recon_loss;
                    em.kl += rep.kl;
                    em.beta_mean += rep.beta_mean;
                    break;
                }
                case run_mode::vfa_gan: {
                    gan_options go;
                    go.encoder = vo;
                    const auto rep = gan_train_step(*model.vfa, *model.gan, x, labels, go, gan_opt, streams);
                    em.recon_loss += rep.encoder.recon_loss;
                    em.kl += rep.encoder.kl;
                    em.beta_mean += rep.encoder.beta_mean;
                    em.g_loss += rep.generator.total;
                    em.d_loss += rep.discriminator_loss;
                    break;
                }
                }
            }
            catch (const numeric_error& e) {
                throw numeric_error(fmt::format("training diverged in epoch {}: {}", epoch, e.what()), global_step);
            }
            if (!std::isfinite(em.recon_loss) || !std::isfinite(em.g_loss) || !std::isfinite(em.d_loss))
                throw numeric_error(fmt::format("training diverged in epoch {}: non-finite loss", epoch), global_step);
        }
        const double nb = static_cast<double>(batches);
        em.recon_loss /= nb;
        for (double& u : em.unit_loss) u /= nb;
        em.kl /= nb;
        em.beta_mean /= nb;
        em.g_loss /= nb;
        em.d_loss /= nb;
        const eval_metrics_row ev = evaluate(model, reference, eval_x, cfg.inference, eval_seed);
        em.heldout_mse = ev.heldout_mse;
        em.encoder_fd = ev.encoder_fd;

        std::vector<double> row{static_cast<double>(epoch), em.recon_loss, em.heldout_mse, em.encoder_fd};
        row.insert(row.end(), em.unit_loss.begin(), em.unit_loss.end());
        if (is_variational(cfg.mode)) row.insert(row.end(), {em.kl, em.beta_mean});
        if (cfg.mode == run_mode::vfa_gan) row.insert(row.end(), {em.g_loss, em.d_loss});
        metrics << format_row(row) << "\n" << std::flush;

        const fs::path ckpt = checkpoint_path(dir, epoch);
        switch (cfg.mode) {
        case run_mode::fa: save_checkpoint(ckpt, model.net, adam); break;
        case run_mode::local_fa: save_checkpoint(ckpt, model.net, merge_adams(local_adams)); break;
        case run_mode::vfa: save_checkpoint(ckpt, vfa_architecture(*cfg.vfa), std::as_const(*model.vfa).parameters(), adam); break;
        case run_mode::vfa_gan:
            save_checkpoint(ckpt, vfa_architecture(*cfg.vfa), std::as_const(*model.vfa).parameters(), gan_opt.encoder);
            save_checkpoint(checkpoint_path(dir, epoch, "generator"), model.gan->generator, gan_opt.generator);
            save_checkpoint(checkpoint_path(dir, epoch, "discriminator"), model.gan->discriminator,
                            gan_opt.discriminator);
            break;
        }
        result.epochs.push_back(std::move(em));
    }

    const shape_t& shape = data.train.example_shape;
    if (image_shaped(shape) && cfg.grid_count > 0) {
        const std::size_t k = std::min(cfg.grid_count, eval_set.size());
        const tensor originals = subset(eval_set, 0, k).x;
        const tensor recon = reconstruct(model, originals, cfg.inference, eval_seed);
        const std::size_t pair_cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(k))));
        emit_pair_grid(recon, originals, shape, (k + pair_cols - 1) / pair_cols, pair_cols,
                       dir / (shape[0] == 1 ? "reconstructions.pgm" : "reconstructions.ppm"));
        if (model.vfa) {
            generate_options go;
            go.feature = cfg.inference;
            const tensor samples = generate(*model.vfa, k, rng::derive(cfg.seed, "samples"), go,
                                            model.gan ? &model.gan->generator : nullptr);
            const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(double(k))));
            emit_image_grid(samples, shape, (k + cols - 1) / cols, cols,
                            dir / (shape[0] == 1 ? "samples.pgm" : "samples.ppm"));
        }
    }

    json summary{{"mode", to_string(cfg.mode)},
                 {"initial_heldout_mse", result.initial_heldout_mse},
                 {"initial_encoder_fd", result.initial_encoder_fd},
                 {"final_heldout_mse", result.epochs.back().heldout_mse},
                 {"final_encoder_fd", result.epochs.back().encoder_fd},
                 {"train_examples", data.train.size()},
                 {"eval_examples", eval_x.extent(0)},
                 {"steps", global_step}};
    std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
    return result;
}

} // namespace featalign
