#include "adf/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include <CLI11.hpp>

#include "adf/attribution.hpp"
#include "adf/binary_io.hpp"
#include "adf/datapipe.hpp"
#include "adf/errors.hpp"
#include "adf/evalkit.hpp"
#include "adf/parallel.hpp"
#include "adf/run_config.hpp"
#include "adf/trainer.hpp"

namespace adf::cli {

namespace fs = std::filesystem;

namespace {

struct ScoreTarget {
    std::string id;
    fs::path path;
};

// A single file keeps its stem as id; a directory is searched recursively
// and ids are relative paths without extension ("scratch/004").
std::vector<ScoreTarget> collect_images(const fs::path& root) {
    std::vector<ScoreTarget> out;
    if (fs::is_regular_file(root)) {
        out.push_back({root.stem().string(), root});
        return out;
    }
    if (!fs::is_directory(root)) throw IoError("no such file or directory: " + root.string());
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        fs::path rel = fs::relative(entry.path(), root);
        rel.replace_extension();
        out.push_back({rel.generic_string(), entry.path()});
    }
    std::sort(out.begin(), out.end(), [](const ScoreTarget& a, const ScoreTarget& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (out[i].id == out[i - 1].id) throw InputError("duplicate image id '" + out[i].id + "'");
    }
    if (out.empty()) throw InputError("no images found under " + root.string());
    return out;
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
    if (path.empty() || path == "-") {
        out << text;
    } else {
        write_file_atomic(path, text);
    }
}

std::string tree_summary(const DatasetLayout& layout) {
    std::map<std::string, std::size_t> defects;
    for (const auto& p : layout.test_anomalous) ++defects[p.anomaly_type];
    std::string s = layout.category_dir().generic_string() + "\n";
    s += "  train/good " + std::to_string(layout.train_flawless.size()) + "\n";
    s += "  test/good " + std::to_string(layout.test_flawless.size()) + "\n";
    for (const auto& [name, n] : defects) s += "  test/" + name + " " + std::to_string(n) + "\n";
    return s;
}

int cmd_synth(const fs::path& out_dir, std::uint64_t seed, std::size_t n_train, std::size_t n_good,
              std::size_t n_defect, std::ostream& out) {
    if (n_train == 0 || n_good == 0 || n_defect == 0) throw ConfigError("synth: all counts must be at least 1");
    const DatasetLayout layout = synth_dataset(out_dir, n_train, n_good, n_defect, seed);
    out << tree_summary(layout);
    return kOk;
}

int cmd_train(const fs::path& config_path, const std::string& out_override, bool quiet, std::ostream& out) {
    // The echo keeps the config as written so that reruns into different
    // directories produce identical checkpoints.
    const RunConfig cfg = RunConfig::load(config_path);
    const std::string out_dir = out_override.empty() ? cfg.output_dir : out_override;
    if (out_dir.empty()) throw ConfigError("train: no output directory (set output_dir or pass --out)");
    if (cfg.dataset_root.empty()) throw ConfigError("train: config key 'dataset_root' is empty");

    const DatasetLayout layout = load_dataset(cfg.dataset_root, cfg.category);
    std::vector<Tensor> images;
    for (auto& s : layout.load_train()) images.push_back(std::move(s.image));

    Model model = build_model(cfg);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    const TrainResult result = train(model, images, tc, [&](const EpochStats& e) {
        if (quiet) return;
        char buf[96];
        std::snprintf(buf, sizeof buf, "epoch %zu mean_nll %.6f (%.1fs)\n", e.epoch, e.mean_nll, e.seconds);
        out << buf << std::flush;
    });
    save_checkpoint(out_dir, cfg, model, result.epochs);
    out << "checkpoint written to " << out_dir << "\n";
    return kOk;
}

int cmd_score(const fs::path& checkpoint, const fs::path& images, const std::string& out_path,
              std::size_t n_eval_override, bool debug, std::ostream& out, std::ostream& err) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    ScoringConfig sc = ck.config.scoring;
    if (n_eval_override) sc.n_eval_transforms = n_eval_override;
    sc.validate();
    const std::vector<ScoreTarget> targets = collect_images(images);

    std::vector<ScoreRow> rows(targets.size());
    std::vector<std::vector<float>> per_transform(targets.size());
    parallel_for(targets.size(), [&](std::size_t i) {
        const Sample s = decode_image(targets[i].path);
        per_transform[i] = transform_nlls(ck.model, s.image, sc);
        double acc = 0.0;
        for (float v : per_transform[i]) acc += v;
        rows[i] = {targets[i].id, static_cast<double>(static_cast<float>(acc / static_cast<double>(per_transform[i].size())))};
    });
    if (debug) {
        char buf[64];
        for (std::size_t i = 0; i < targets.size(); ++i) {
            err << targets[i].id << " nll";
            for (float v : per_transform[i]) {
                std::snprintf(buf, sizeof buf, " %.9g", v);
                err << buf;
            }
            err << "\n";
        }
    }
    write_text(out_path, format_scores_csv(rows), out);
    return kOk;
}

struct EvalOptions {
    std::vector<std::string> scores;
    std::string labels;
    std::string dataset;
    std::string category = synth_category;
    std::vector<std::string> variants;  // one per score file, or one for all
    std::string format = "markdown";
    std::string out;
};

std::string cell(const std::vector<std::string>& row, long col, const std::string& fallback) {
    if (col < 0) return fallback;
    if (static_cast<std::size_t>(col) >= row.size()) throw FormatError("score file row is missing a column");
    return row[static_cast<std::size_t>(col)];
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
    const ReportFormat format = parse_report_format(o.format);

    std::map<std::string, Label> known;
    if (!o.labels.empty()) {
        const CsvTable t = read_csv(o.labels);
        const long id = t.column("id"), label = t.column("label");
        if (id < 0 || label < 0) throw FormatError(o.labels + ": expected columns id,label");
        for (const auto& r : t.rows) known[cell(r, id, "")] = parse_label(cell(r, label, ""));
    }
    if (!o.dataset.empty()) {
        const DatasetLayout layout = load_dataset(o.dataset, o.category);
        for (const auto& p : layout.test_flawless) known["good/" + p.stem().string()] = Label::flawless;
        for (const auto& p : layout.test_anomalous) known[p.anomaly_type + "/" + p.path.stem().string()] = Label::anomalous;
    }

    // variant -> category -> scores, both in order of first appearance
    std::vector<std::string> variants, categories;
    std::map<std::pair<std::string, std::string>, ScoredSet> sets;
    if (!o.variants.empty() && o.variants.size() != 1 && o.variants.size() != o.scores.size()) {
        throw ConfigError("eval: give --variant once or once per --scores file");
    }
    for (std::size_t f = 0; f < o.scores.size(); ++f) {
        const std::string& path = o.scores[f];
        const std::string fallback_variant =
            o.variants.empty() ? "model" : o.variants[o.variants.size() == 1 ? 0 : f];
        const CsvTable t = read_csv(path);
        const long id = t.column("id"), score = t.column("score");
        if (id < 0 || score < 0) throw FormatError(path + ": expected columns id,score");
        const long label = t.column("label"), category = t.column("category"), variant = t.column("variant");
        for (const auto& r : t.rows) {
            const std::string key = cell(r, id, "");
            Label lab;
            if (label >= 0) {
                lab = parse_label(cell(r, label, ""));
            } else {
                const auto it = known.find(key);
                if (it == known.end()) throw InputError("no label for id '" + key + "' in " + path);
                lab = it->second;
            }
            double value = 0.0;
            try {
                std::size_t used = 0;
                const std::string text = cell(r, score, "");
                value = std::stod(text, &used);
                if (used != text.size()) throw std::invalid_argument(text);
            } catch (const std::logic_error&) {
                throw FormatError(path + ": bad score for id '" + key + "'");
            }
            const std::string v = cell(r, variant, fallback_variant);
            const std::string c = cell(r, category, o.category);
            if (std::find(variants.begin(), variants.end(), v) == variants.end()) variants.push_back(v);
            if (std::find(categories.begin(), categories.end(), c) == categories.end()) categories.push_back(c);
            sets[{v, c}].add(key, value, lab);
        }
    }
    if (sets.empty()) throw InputError("eval: score files contain no rows");

    std::vector<EvalReport> reports;
    for (const auto& v : variants) {
        EvalReport rep;
        rep.variant = v;
        for (const auto& c : categories) {
            const auto it = sets.find({v, c});
            if (it == sets.end()) throw InputError("eval: variant '" + v + "' has no scores for category '" + c + "'");
            rep.rows.push_back(evaluate_category(c, it->second));
        }
        reports.push_back(std::move(rep));
    }
    write_text(o.out, render_report(reports, format), out);
    return kOk;
}

int cmd_explain(const fs::path& checkpoint, const fs::path& image, std::string stage, const fs::path& out_dir,
                std::ostream& out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    if (stage.empty()) stage = ck.model.backbone.stage_names().back();
    ck.model.backbone.stage_index(stage);
    const Sample s = decode_image(image);
    const Heatmap hm = grad_cam(ck.model, s.image, stage, ck.config.scoring, {}, s.id);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    const fs::path path = out_dir / (hm.input_id + "." + stage + ".ppm");
    write_heatmap_overlay(s.image, hm, path);
    out << path.generic_string() << "\n";
    return kOk;
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e)) return kDiverged;
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
        dynamic_cast<const LayoutError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) {
        return kIo;
    }
    return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Attention-augmented flow anomaly detector"};
    app.require_subcommand(1);

    std::string synth_out;
    std::uint64_t synth_seed = 7;
    std::size_t n_train = 200, n_good = 50, n_defect = 50;
    auto* synth = app.add_subcommand("synth", "Generate the synthetic texture dataset");
    synth->add_option("--out", synth_out, "Output root")->required();
    synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
    synth->add_option("--n-train", n_train, "Flawless training images")->capture_default_str();
    synth->add_option("--n-test-good", n_good, "Flawless test images")->capture_default_str();
    synth->add_option("--n-test-defect", n_defect, "Defective test images")->capture_default_str();

    std::string config_path, train_out;
    bool quiet = false;
    auto* trn = app.add_subcommand("train", "Train a model from a JSON run config");
    trn->add_option("--config", config_path, "Run config (flat JSON)")->required();
    trn->add_option("--out", train_out, "Checkpoint directory (overrides output_dir)");
    trn->add_flag("--quiet", quiet, "No per-epoch lines");

    std::string ckpt, images, scores_out;
    std::size_t n_eval = 0;
    bool debug = false;
    auto* score = app.add_subcommand("score", "Score images with a checkpoint");
    score->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    score->add_option("--images", images, "Image file or directory")->required();
    score->add_option("--out", scores_out, "Score CSV (default stdout)");
    score->add_option("--n-eval-transforms", n_eval, "Override the eval transform count");
    score->add_flag("--debug", debug, "Print per-transform nll values to stderr");

    EvalOptions eo;
    auto* eval = app.add_subcommand("eval", "AUROC report from score files");
    eval->add_option("--scores", eo.scores, "Score CSV (id,score[,label][,category][,variant])")->required();
    auto* lab = eval->add_option("--labels", eo.labels, "CSV with id,label");
    eval->add_option("--dataset", eo.dataset, "Dataset root; labels come from {root}/{category}/test")->excludes(lab);
    eval->add_option("--category", eo.category, "Category name")->capture_default_str();
    eval->add_option("--variant", eo.variants, "Variant name for files without a variant column (once, or per file)");
    eval->add_option("--format", eo.format, "csv or markdown")->capture_default_str();
    eval->add_option("--out", eo.out, "Report file (default stdout)");

    std::string ex_ckpt, ex_image, ex_stage, ex_out;
    auto* explain = app.add_subcommand("explain", "Grad-CAM overlay of the anomaly score");
    explain->add_option("--checkpoint", ex_ckpt, "Checkpoint directory")->required();
    explain->add_option("--image", ex_image, "Image file")->required();
    explain->add_option("--stage", ex_stage, "Target stage (default: last)");
    explain->add_option("--out", ex_out, "Output directory")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) return cmd_synth(synth_out, synth_seed, n_train, n_good, n_defect, out);
        if (*trn) return cmd_train(config_path, train_out, quiet, out);
        if (*score) return cmd_score(ckpt, images, scores_out, n_eval, debug, out, err);
        if (*eval) return cmd_eval(eo, out);
        if (*explain) return cmd_explain(ex_ckpt, ex_image, ex_stage, ex_out, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return kUsage;
}

}  // namespace adf::cli
