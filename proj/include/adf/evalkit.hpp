#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "adf/datapipe.hpp"

namespace adf {

struct ScoredEntry {
    std::string id;
    double score = 0.0;
    Label label = Label::flawless;
};

struct ScoredSet {
    std::vector<ScoredEntry> entries;

    void add(std::string id, double score, Label label) { entries.push_back({std::move(id), score, label}); }
    std::size_t count(Label label) const;
};

/// P(anomalous score > flawless score) with ties counted one half. Sorting
/// based, O(n log n); equals exhaustive pair counting exactly.
/// Throws MetricUndefinedError unless both labels are present and
/// InputError on non-finite scores.
double auroc(const ScoredSet& s);

/// Threshold maximizing TPR - FPR, where "anomalous" means score > threshold.
/// Candidates are midpoints between adjacent distinct scores; ties go to the
/// lower candidate. With a single distinct score that score is returned.
double select_threshold(const ScoredSet& s);

struct CategoryResult {
    std::string category;
    double auroc = 0.0;  // fraction in [0,1]
    std::size_t n_flawless = 0;
    std::size_t n_anomalous = 0;
    double threshold = 0.0;
};

/// One model variant evaluated over one or more categories.
struct EvalReport {
    std::string variant;
    std::vector<CategoryResult> rows;

    /// Unweighted mean over categories.
    double mean_auroc() const;
};

CategoryResult evaluate_category(const std::string& category, const ScoredSet& s);

enum class ReportFormat { csv, markdown };
ReportFormat parse_report_format(const std::string& name);

/// AUROC fraction as a percent string with two decimals ("82.81").
std::string format_percent(double fraction);

/// Markdown: one row per category, one column per variant, then an
/// "Average AUROC" row. CSV: category,variant,auroc_percent,n_flawless,
/// n_anomalous,threshold in long form, average rows last.
std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format);

// Score files --------------------------------------------------------------

struct ScoreRow {
    std::string id;
    double score = 0.0;
};

/// "id,score" lines after a header; scores printed with round-trip precision.
std::string format_scores_csv(const std::vector<ScoreRow>& rows);

/// Generic CSV table: header names plus rows of cells. Only plain cells (no
/// quoting) are supported; files written by this library never need it.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index or -1.
    long column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

Label parse_label(const std::string& text);

}  // namespace adf
