#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "adf/backbone.hpp"
#include "adf/flow.hpp"
#include "adf/trainer.hpp"

namespace adf {

enum class Variant { differnet, attent_se, attent_cbam };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
AttentionKind attention_of(Variant v);

/// Everything a run needs, serialized as one flat JSON object. Keys are the
/// field names below; `dim` is accepted but must equal the derived value.
struct RunConfig {
    Variant variant = Variant::differnet;
    std::string dataset_root;
    std::string category = "synthetic";
    std::string output_dir;
    std::uint64_t seed = 0;  // drives backbone and flow init and training

    std::vector<std::size_t> scales{256, 128, 64};
    std::size_t top_channels = 128;
    std::size_t reduction_ratio = 0;
    std::size_t spatial_kernel = 7;
    std::size_t pool_window = 2;

    std::size_t n_blocks = 8;
    std::size_t subnet_hidden = 0;
    float clamp = 3.0f;

    TrainConfig train;
    ScoringConfig scoring;

    BackboneSpec backbone_spec() const;
    FlowConfig flow_config() const;
    /// Throws ConfigError on any invalid field.
    void validate() const;

    /// Unknown keys and wrongly typed values raise ConfigError naming the key.
    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    static RunConfig load(const std::filesystem::path& path);
};

/// Fresh model for a configuration: backbone and flow seeds derive from
/// cfg.seed, the feature norm starts as the identity.
Model build_model(const RunConfig& cfg);

/// Files inside a checkpoint directory.
inline constexpr const char* kWeightsFile = "model.adwt";
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kLossFile = "loss.csv";

struct Checkpoint {
    RunConfig config;
    Model model;
};

/// Writes model.adwt, config.json and, when `history` is non-empty,
/// loss.csv ("epoch,mean_nll"). Every file is written atomically.
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const Model& model,
                     const std::vector<EpochStats>& history = {});
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string format_loss_csv(const std::vector<EpochStats>& history);

}  // namespace adf
