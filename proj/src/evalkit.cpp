#include "adf/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "adf/errors.hpp"

namespace adf {

namespace {

void check_scores(const ScoredSet& s, const char* what) {
    for (const auto& e : s.entries) {
        if (!std::isfinite(e.score)) throw InputError(std::string(what) + ": non-finite score for '" + e.id + "'");
    }
}

std::vector<std::size_t> order_by_score(const ScoredSet& s) {
    std::vector<std::size_t> idx(s.entries.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return s.entries[a].score < s.entries[b].score; });
    return idx;
}

std::string trim(std::string s) {
    const auto issp = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && issp(s.back())) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && issp(s[i])) ++i;
    return s.substr(i);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::size_t ScoredSet::count(Label label) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const ScoredEntry& e) { return e.label == label; }));
}

double auroc(const ScoredSet& s) {
    const std::size_t nf = s.count(Label::flawless), na = s.count(Label::anomalous);
    if (nf == 0 || na == 0) {
        throw MetricUndefinedError("auroc: needs both labels (got " + std::to_string(nf) + " flawless, " +
                                   std::to_string(na) + " anomalous)");
    }
    check_scores(s, "auroc");
    const auto idx = order_by_score(s);
    // Walk groups of equal scores; each anomalous entry wins against every
    // flawless entry below its group and half-wins against ties.
    double wins2 = 0.0;  // twice the Mann-Whitney U, an exact integer
    std::size_t flawless_below = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i, f = 0, a = 0;
        while (j < idx.size() && s.entries[idx[j]].score == s.entries[idx[i]].score) {
            (s.entries[idx[j]].label == Label::flawless ? f : a) += 1;
            ++j;
        }
        wins2 += static_cast<double>(a) * static_cast<double>(2 * flawless_below + f);
        flawless_below += f;
        i = j;
    }
    return wins2 / (2.0 * static_cast<double>(nf) * static_cast<double>(na));
}

double select_threshold(const ScoredSet& s) {
    const std::size_t nf = s.count(Label::flawless), na = s.count(Label::anomalous);
    if (nf == 0 || na == 0) throw MetricUndefinedError("select_threshold: needs both labels");
    check_scores(s, "select_threshold");
    const auto idx = order_by_score(s);
    // Sweep thresholds upward; after passing a group, its members are
    // predicted flawless (score <= threshold).
    std::size_t f_le = 0, a_le = 0;
    double best_j = -2.0, best_t = s.entries[idx.front()].score;
    bool any = false;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        const double v = s.entries[idx[i]].score;
        while (j < idx.size() && s.entries[idx[j]].score == v) {
            (s.entries[idx[j]].label == Label::flawless ? f_le : a_le) += 1;
            ++j;
        }
        if (j == idx.size()) break;
        const double t = v + (s.entries[idx[j]].score - v) / 2.0;
        const double tpr = static_cast<double>(na - a_le) / static_cast<double>(na);
        const double fpr = static_cast<double>(nf - f_le) / static_cast<double>(nf);
        if (!any || tpr - fpr > best_j) {
            best_j = tpr - fpr;
            best_t = t;
            any = true;
        }
        i = j;
    }
    return best_t;
}

double EvalReport::mean_auroc() const {
    if (rows.empty()) throw InputError("report '" + variant + "' has no categories");
    double acc = 0.0;
    for (const auto& r : rows) acc += r.auroc;
    return acc / static_cast<double>(rows.size());
}

CategoryResult evaluate_category(const std::string& category, const ScoredSet& s) {
    CategoryResult r;
    r.category = category;
    r.auroc = auroc(s);
    r.threshold = select_threshold(s);
    r.n_flawless = s.count(Label::flawless);
    r.n_anomalous = s.count(Label::anomalous);
    return r;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "csv") return ReportFormat::csv;
    if (name == "markdown" || name == "md") return ReportFormat::markdown;
    throw ConfigError("unknown report format '" + name + "' (expected csv or markdown)");
}

std::string format_percent(double fraction) {
    // Round half up in hundredths of a percent; the nudge absorbs binary
    // representation error of decimal inputs such as 0.92456.
    const long long hundredths = std::llround(std::floor(fraction * 10000.0 + 0.5 + 1e-7));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld.%02lld", hundredths / 100, hundredths % 100);
    return buf;
}

std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format) {
    if (reports.empty()) throw InputError("render_report: no reports");
    std::vector<std::string> categories;
    for (const auto& rep : reports) {
        if (rep.rows.empty()) throw InputError("render_report: report '" + rep.variant + "' has no categories");
        for (const auto& row : rep.rows) {
            if (std::find(categories.begin(), categories.end(), row.category) == categories.end()) {
                categories.push_back(row.category);
            }
        }
    }
    auto find = [](const EvalReport& rep, const std::string& cat) -> const CategoryResult* {
        for (const auto& r : rep.rows)
            if (r.category == cat) return &r;
        return nullptr;
    };

    std::ostringstream out;
    if (format == ReportFormat::markdown) {
        out << "| Category |";
        for (const auto& rep : reports) out << ' ' << rep.variant << " |";
        out << "\n|---|";
        for (std::size_t i = 0; i < reports.size(); ++i) out << "---:|";
        out << '\n';
        for (const auto& cat : categories) {
            out << "| " << cat << " |";
            for (const auto& rep : reports) {
                const CategoryResult* r = find(rep, cat);
                out << ' ' << (r ? format_percent(r->auroc) : "-") << " |";
            }
            out << '\n';
        }
        out << "| Average AUROC |";
        for (const auto& rep : reports) out << ' ' << format_percent(rep.mean_auroc()) << " |";
        out << '\n';
    } else {
        out << "category,variant,auroc_percent,n_flawless,n_anomalous,threshold\n";
        for (const auto& cat : categories) {
            for (const auto& rep : reports) {
                const CategoryResult* r = find(rep, cat);
                if (!r) continue;
                out << cat << ',' << rep.variant << ',' << format_percent(r->auroc) << ',' << r->n_flawless << ','
                    << r->n_anomalous << ',' << format_double(r->threshold) << '\n';
            }
        }
        for (const auto& rep : reports) {
            out << "Average AUROC," << rep.variant << ',' << format_percent(rep.mean_auroc()) << ",,,\n";
        }
    }
    return out.str();
}

std::string format_scores_csv(const std::vector<ScoreRow>& rows) {
    std::string out = "id,score\n";
    for (const auto& r : rows) out += r.id + "," + format_double(r.score) + "\n";
    return out;
}

long CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<long>(i);
    return -1;
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto cells = split_csv(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size()) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(t.header.size()) + " cells, got " + std::to_string(cells.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw FormatError(path.string() + ": empty CSV file");
    return t;
}

Label parse_label(const std::string& text) {
    if (text == "flawless" || text == "good" || text == "0") return Label::flawless;
    if (text == "anomalous" || text == "defect" || text == "1") return Label::anomalous;
    throw FormatError("unknown label '" + text + "' (expected flawless/anomalous or 0/1)");
}

}  // namespace adf
