#pragma once

// Experiment configuration, run orchestration and the trained-model
// operations behind the command-line tool.

#include "featalign/adversarial.hpp"
#include "featalign/data.hpp"
#include "featalign/local_fa.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace featalign {

/// Invalid configuration; `field()` is the dotted path of the offending entry.
class config_error : public std::invalid_argument {
public:
    config_error(std::string field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(std::move(field))
    {
    }
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

enum class run_mode { fa, vfa, vfa_gan, local_fa };
std::string_view to_string(run_mode m);

enum class dataset_kind { mnist, synthetic, image_folder };

struct dataset_config {
    dataset_kind kind = dataset_kind::mnist;
    std::filesystem::path images;                ///< mnist
    std::optional<std::filesystem::path> labels; ///< mnist
    std::filesystem::path folder;                ///< image-folder
    std::string synthetic;                       ///< ring | gaussian | mixed
    std::size_t synthetic_n = 0;
    std::size_t synthetic_dim = 2;
    std::size_t train = 0; ///< 0: everything not held out
    std::size_t holdout = 0;
};

struct gan_config {
    network_spec generator;
    network_spec discriminator;
    double lambda = 0.0;
    adam_settings generator_opt;
    adam_settings discriminator_opt;
};

struct experiment_config {
    std::string preset; ///< empty when none
    run_mode mode = run_mode::fa;
    dataset_config dataset;
    network_spec network;           ///< fa, local-fa
    std::optional<vfa_spec> vfa;    ///< vfa, vfa-gan
    std::optional<gan_config> gan;  ///< vfa-gan
    feature_config feature;         ///< training-time extraction
    feature_config inference;       ///< evaluation-time extraction
    gradient_path path = gradient_path::unrolled;
    bool target_gradient = false;
    beta_mode beta = beta_mode::uniform;
    double beta_value = 1.0;
    adam_settings optimizer;
    int epochs = 1;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    std::size_t grid_count = 32;
    nlohmann::json resolved; ///< the configuration after presets and overrides
};

/// Preset fragments (`mnist-desk`, `mnist-full`) for a mode; explicit fields override them.
nlohmann::json preset_json(const std::string& name, run_mode mode);

struct config_overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> output_dir;
    std::optional<int> epochs;
};

/// Validates and resolves a configuration. Relative dataset paths are looked
/// up next to `base_dir`, then under $FEATALIGN_DATA.
experiment_config parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir,
                               const config_overrides& overrides = {});
experiment_config load_config(const std::filesystem::path& path, const config_overrides& overrides = {});

struct split_dataset {
    dataset train;
    dataset holdout;
};
split_dataset load_dataset(const experiment_config& cfg);

/// A model in any of the supported modes.
struct trained_model {
    run_mode mode = run_mode::fa;
    network net;               ///< fa, local-fa
    std::optional<vfa_model> vfa;
    std::optional<gan_bundle> gan;

    std::size_t input_size() const;
};

/// Freshly initialized model for a configuration.
trained_model initial_model(const experiment_config& cfg);
/// Fixed encoder used to compare real and reconstructed inputs (encoder-FD).
network reference_encoder(const experiment_config& cfg);

/// Reconstruction of `x` through the model's own encoder and feature extraction.
tensor reconstruct(const trained_model& m, const tensor& x, const feature_config& cfg, std::uint64_t seed);

/// Checkpoint file for a given epoch (1-based); `part` is "", "generator" or "discriminator".
std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, int epoch, const std::string& part = {});
/// Loads the model saved at `checkpoint` (the encoder file for vfa-gan).
trained_model load_trained(const experiment_config& cfg, const std::filesystem::path& checkpoint);
/// Checkpoint of the last completed epoch in the run directory.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

struct epoch_metrics {
    int epoch = 0;
    double recon_loss = 0.0;  ///< mean training loss per batch
    double heldout_mse = 0.0; ///< per-element squared error on evaluation inputs
    double encoder_fd = 0.0;
    std::vector<double> unit_loss; ///< local-fa
    double kl = 0.0, beta_mean = 0.0;
    double g_loss = 0.0, d_loss = 0.0;
};

struct run_result {
    std::filesystem::path dir;
    double initial_heldout_mse = 0.0;
    double initial_encoder_fd = 0.0;
    std::vector<epoch_metrics> epochs;
};

/// Trains per the configuration and writes metrics.csv, per-epoch
/// checkpoints, image grids, summary.json and the configuration copies.
/// `config_text` is copied verbatim as config.json.
run_result run_experiment(const experiment_config& cfg, const std::string& config_text);

struct eval_metrics_row {
    double heldout_mse = 0.0;
    double encoder_fd = 0.0;
};
eval_metrics_row evaluate(const trained_model& m, const network& reference, const tensor& x,
                          const feature_config& cfg, std::uint64_t seed);

} // namespace featalign
