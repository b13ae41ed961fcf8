#include "adf/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <map>

#include <json.hpp>

#include "adf/binary_io.hpp"
#include "adf/errors.hpp"
#include "adf/random.hpp"
#include "adf/weights.hpp"

namespace adf {

namespace {

using nlohmann::json;

// Shortest decimal that reads back as the same float, so 2e-4f is echoed as
// 0.0002 rather than 0.00019999999494757503.
double tidy(float f) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, f);
    *res.ptr = '\0';
    return std::strtod(buf, nullptr);
}

std::uint64_t as_uint(const json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError("config key '" + key + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

float as_float(const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    return static_cast<float>(v.get<double>());
}

bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
    return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    return v.get<std::string>();
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

template <typename T>
Setter uint_field(T RunConfig::*field) {
    return [field](RunConfig& c, const json& v, const std::string& k) { c.*field = static_cast<T>(as_uint(v, k)); };
}

template <typename T>
Setter train_uint(T TrainConfig::*field) {
    return [field](RunConfig& c, const json& v, const std::string& k) { c.train.*field = static_cast<T>(as_uint(v, k)); };
}

Setter train_float(float TrainConfig::*field) {
    return [field](RunConfig& c, const json& v, const std::string& k) { c.train.*field = as_float(v, k); };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"variant", [](RunConfig& c, const json& v, const std::string& k) {
             try {
                 c.variant = parse_variant(as_string(v, k));
             } catch (const ConfigError& e) {
                 throw ConfigError("config key 'variant': " + std::string(e.what()));
             }
         }},
        {"dataset_root", [](RunConfig& c, const json& v, const std::string& k) { c.dataset_root = as_string(v, k); }},
        {"category", [](RunConfig& c, const json& v, const std::string& k) { c.category = as_string(v, k); }},
        {"output_dir", [](RunConfig& c, const json& v, const std::string& k) { c.output_dir = as_string(v, k); }},
        {"seed", uint_field(&RunConfig::seed)},
        {"scales", [](RunConfig& c, const json& v, const std::string& k) {
             if (!v.is_array()) throw ConfigError("config key '" + k + "' must be an array of integers");
             c.scales.clear();
             for (const auto& s : v) c.scales.push_back(static_cast<std::size_t>(as_uint(s, k)));
         }},
        {"top_channels", uint_field(&RunConfig::top_channels)},
        {"reduction_ratio", uint_field(&RunConfig::reduction_ratio)},
        {"spatial_kernel", uint_field(&RunConfig::spatial_kernel)},
        {"pool_window", uint_field(&RunConfig::pool_window)},
        {"dim", [](RunConfig& c, const json& v, const std::string& k) {
             const auto d = as_uint(v, k);
             if (d != c.scales.size() * c.top_channels) {
                 throw ConfigError("config key 'dim' is " + std::to_string(d) + " but scales x top_channels gives " +
                                   std::to_string(c.scales.size() * c.top_channels));
             }
         }},
        {"n_blocks", uint_field(&RunConfig::n_blocks)},
        {"subnet_hidden", uint_field(&RunConfig::subnet_hidden)},
        {"clamp", [](RunConfig& c, const json& v, const std::string& k) { c.clamp = as_float(v, k); }},
        {"epochs", train_uint(&TrainConfig::epochs)},
        {"batch_size", train_uint(&TrainConfig::batch_size)},
        {"learning_rate", train_float(&TrainConfig::learning_rate)},
        {"adam_beta1", train_float(&TrainConfig::adam_beta1)},
        {"adam_beta2", train_float(&TrainConfig::adam_beta2)},
        {"adam_eps", train_float(&TrainConfig::adam_eps)},
        {"n_train_transforms", train_uint(&TrainConfig::n_train_transforms)},
        {"freeze_backbone", [](RunConfig& c, const json& v, const std::string& k) {
             c.train.freeze_backbone = as_bool(v, k);
         }},
        {"backbone_lr_scale", train_float(&TrainConfig::backbone_lr_scale)},
        {"feature_noise", train_float(&TrainConfig::feature_noise)},
        {"norm_floor", train_float(&TrainConfig::norm_floor)},
        {"n_eval_transforms", [](RunConfig& c, const json& v, const std::string& k) {
             c.scoring.n_eval_transforms = static_cast<std::size_t>(as_uint(v, k));
         }},
    };
    return table;
}

}  // namespace

Variant parse_variant(const std::string& name) {
    if (name == "differnet") return Variant::differnet;
    if (name == "attent_se") return Variant::attent_se;
    if (name == "attent_cbam") return Variant::attent_cbam;
    throw ConfigError("unknown variant '" + name + "' (expected differnet, attent_se or attent_cbam)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::differnet: return "differnet";
        case Variant::attent_se: return "attent_se";
        case Variant::attent_cbam: return "attent_cbam";
    }
    return "differnet";
}

AttentionKind attention_of(Variant v) {
    switch (v) {
        case Variant::attent_se: return AttentionKind::se;
        case Variant::attent_cbam: return AttentionKind::cbam;
        default: return AttentionKind::none;
    }
}

BackboneSpec RunConfig::backbone_spec() const {
    BackboneSpec spec = BackboneSpec::standard(attention_of(variant), scales, top_channels);
    spec.reduction_ratio = reduction_ratio;
    spec.spatial_kernel = spatial_kernel;
    spec.pool_window = pool_window;
    return spec;
}

FlowConfig RunConfig::flow_config() const {
    FlowConfig f;
    f.dim = scales.size() * top_channels;
    f.n_blocks = n_blocks;
    f.subnet_hidden = subnet_hidden;
    f.clamp = clamp;
    f.seed = derive_seed(seed, 2);
    return f;
}

void RunConfig::validate() const {
    backbone_spec().validate();
    flow_config().validate();
    train.validate();
    scoring.validate();
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig cfg;
    // scales and top_channels first so that `dim` can be checked against them
    for (const char* key : {"scales", "top_channels"}) {
        if (doc.contains(key)) setters().at(key)(cfg, doc.at(key), key);
    }
    for (const auto& [key, value] : doc.items()) {
        const auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(cfg, value, key);
    }
    cfg.validate();
    return cfg;
}

std::string RunConfig::to_json_text() const {
    json doc;
    doc["variant"] = to_string(variant);
    doc["dataset_root"] = dataset_root;
    doc["category"] = category;
    doc["output_dir"] = output_dir;
    doc["seed"] = seed;
    doc["scales"] = scales;
    doc["top_channels"] = top_channels;
    doc["reduction_ratio"] = reduction_ratio;
    doc["spatial_kernel"] = spatial_kernel;
    doc["pool_window"] = pool_window;
    doc["dim"] = scales.size() * top_channels;
    doc["n_blocks"] = n_blocks;
    doc["subnet_hidden"] = subnet_hidden;
    doc["clamp"] = tidy(clamp);
    doc["epochs"] = train.epochs;
    doc["batch_size"] = train.batch_size;
    doc["learning_rate"] = tidy(train.learning_rate);
    doc["adam_beta1"] = tidy(train.adam_beta1);
    doc["adam_beta2"] = tidy(train.adam_beta2);
    doc["adam_eps"] = tidy(train.adam_eps);
    doc["n_train_transforms"] = train.n_train_transforms;
    doc["freeze_backbone"] = train.freeze_backbone;
    doc["backbone_lr_scale"] = tidy(train.backbone_lr_scale);
    doc["feature_noise"] = tidy(train.feature_noise);
    doc["norm_floor"] = tidy(train.norm_floor);
    doc["n_eval_transforms"] = scoring.n_eval_transforms;
    return doc.dump(2) + "\n";
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return from_json_text(std::string(bytes.begin(), bytes.end()));
}

Model build_model(const RunConfig& cfg) {
    cfg.validate();
    Model m{Backbone::build(cfg.backbone_spec(), derive_seed(cfg.seed, 1)), FlowModel::build(cfg.flow_config()),
            FeatureNorm::identity(cfg.scales.size() * cfg.top_channels)};
    return m;
}

std::string format_loss_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,mean_nll\n";
    char buf[64];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e.epoch, e.mean_nll);
        out += buf;
    }
    return out;
}

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const Model& model,
                     const std::vector<EpochStats>& history) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    std::vector<WeightRecord> records = model.backbone.export_records();
    for (auto& r : model.flow.export_records()) records.push_back(std::move(r));
    for (auto& r : model.norm.export_records()) records.push_back(std::move(r));
    write_weight_file(dir / kWeightsFile, records);
    write_file_atomic(dir / kConfigFile, cfg.to_json_text());
    if (!history.empty()) write_file_atomic(dir / kLossFile, format_loss_csv(history));
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
    Checkpoint ck;
    ck.config = RunConfig::load(dir / kConfigFile);
    ck.model = build_model(ck.config);
    const auto records = read_weight_file(dir / kWeightsFile);
    ck.model.backbone.import_records(records);
    ck.model.flow.import_records(records);
    ck.model.norm.import_records(records);
    return ck;
}

}  // namespace adf
