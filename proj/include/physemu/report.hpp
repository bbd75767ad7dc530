#pragma once

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "physemu/training.hpp"

namespace physemu {
namespace report {

namespace fs = std::filesystem;
using nlohmann::json;

// Shortest round-trippable decimal representation; identical doubles format
// identically, which the determinism contract relies on.
inline std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline const char* kMetricsHeader = "step,split,field,frame,metric,value";

// ----------------------------- run directory -----------------------------

// Owns a run directory: config.snapshot, metrics.csv, events.log,
// checkpoints/step_<n>. A lock file guards against concurrent writers.
class RunDir {
public:
    explicit RunDir(const std::string& path) : root_(path) {
        fs::create_directories(root_);
        fs::create_directories(root_ / "checkpoints");
        const fs::path lock = root_ / ".lock";
        std::FILE* f = std::fopen(lock.string().c_str(), "wx");
        if (!f) raise<IoError>("run dir '", path, "' is locked by another writer (remove ", lock.string(), " if stale)");
        std::fclose(f);
        lock_ = lock;
        metrics_.open((root_ / "metrics.csv").string());
        events_.open((root_ / "events.log").string());
        if (!metrics_ || !events_) raise<IoError>("run dir '", path, "': cannot create log files");
        metrics_ << kMetricsHeader << "\n";
    }

    ~RunDir() {
        metrics_.flush();
        events_.flush();
        std::error_code ec;
        fs::remove(lock_, ec);
    }

    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;

    const fs::path& root() const { return root_; }

    void write_snapshot(const json& resolved) {
        std::ofstream os((root_ / "config.snapshot").string());
        os << resolved.dump(2) << "\n";
        if (!os) raise<IoError>("run dir: cannot write config.snapshot");
    }

    void append_metric(const train::LogRow& r) {
        metrics_ << r.step << ',' << r.split << ',' << r.field << ',' << r.frame << ',' << r.metric << ','
                 << format_value(r.value) << '\n';
        metrics_.flush();
    }

    void log_event(const std::string& msg) {
        const std::time_t now = std::time(nullptr);
        char ts[32];
        std::strftime(ts, sizeof(ts), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
        events_ << ts << "Z " << msg << '\n';
        events_.flush();
    }

    std::string checkpoint_path(int64_t step) const { return (root_ / "checkpoints" / ("step_" + std::to_string(step))).string(); }

private:
    fs::path root_;
    fs::path lock_;
    std::ofstream metrics_;
    std::ofstream events_;
};

// ----------------------------- metrics.csv reading -----------------------------

struct CsvRow {
    int64_t step = 0;
    std::string split, field, metric;
    int64_t frame = -1;
    double value = 0.0;
};

inline std::vector<CsvRow> read_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) raise<IoError>("report: cannot open '", path, "'");
    std::string line;
    if (!std::getline(is, line)) raise<IoError>("report: '", path, "' is empty");
    if (line != kMetricsHeader) raise<IoError>("report: unexpected metrics.csv header: ", line);
    std::vector<CsvRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        CsvRow r;
        size_t pos = 0;
        auto next = [&](const char* what) {
            const size_t c = line.find(',', pos);
            if (c == std::string::npos) raise<IoError>("report: malformed csv line (missing ", what, "): ", line);
            std::string tok = line.substr(pos, c - pos);
            pos = c + 1;
            return tok;
        };
        r.step = std::stoll(next("step"));
        r.split = next("split");
        r.field = next("field");
        r.frame = std::stoll(next("frame"));
        r.metric = next("metric");
        r.value = std::stod(line.substr(pos));
        rows.push_back(std::move(r));
    }
    return rows;
}

// ----------------------------- learning-curve rendering -----------------------------

struct Series {
    std::vector<double> x, y;
};

// One panel per metric: VRMSE and the three NEPS bands against step.
inline std::map<std::string, Series> curve_series(const std::vector<CsvRow>& rows) {
    std::map<std::string, Series> out;
    for (const auto& r : rows) {
        if (r.split != "val" || r.field != "all") continue;
        if (r.metric == "vrmse" || r.metric == "neps_low" || r.metric == "neps_mid" || r.metric == "neps_high") {
            if (std::isnan(r.value)) continue;
            out[r.metric].x.push_back(double(r.step));
            out[r.metric].y.push_back(r.value);
        }
    }
    return out;
}

inline void write_curves_csv(const std::vector<CsvRow>& rows, const std::string& path) {
    auto series = curve_series(rows);
    std::map<int64_t, std::map<std::string, double>> by_step;
    for (const auto& [metric, s] : series)
        for (size_t i = 0; i < s.x.size(); ++i) by_step[int64_t(s.x[i])][metric] = s.y[i];
    std::ofstream os(path);
    if (!os) raise<IoError>("report: cannot write '", path, "'");
    os << "step,vrmse,neps_low,neps_mid,neps_high\n";
    for (const auto& [step, vals] : by_step) {
        os << step;
        for (const char* m : {"vrmse", "neps_low", "neps_mid", "neps_high"}) {
            os << ',';
            auto it = vals.find(m);
            if (it != vals.end()) os << format_value(it->second);
        }
        os << '\n';
    }
}

namespace detail {

inline void render_panel(std::string& svg, const Series& s, const std::string& title, double x0, double y0, double w, double h) {
    svg += "<rect x='" + std::to_string(x0) + "' y='" + std::to_string(y0) + "' width='" + std::to_string(w) + "' height='" +
           std::to_string(h) + "' fill='white' stroke='#888'/>\n";
    svg += "<text x='" + std::to_string(x0 + w / 2) + "' y='" + std::to_string(y0 - 6) +
           "' text-anchor='middle' font-size='13' font-family='sans-serif'>" + title + "</text>\n";
    if (s.x.empty()) {
        svg += "<text x='" + std::to_string(x0 + w / 2) + "' y='" + std::to_string(y0 + h / 2) +
               "' text-anchor='middle' font-size='11' fill='#888' font-family='sans-serif'>no data</text>\n";
        return;
    }
    double xmin = s.x.front(), xmax = s.x.back();
    if (xmax <= xmin) xmax = xmin + 1;
    bool logy = true;
    for (double v : s.y)
        if (!(v > 0)) logy = false;
    auto ty = [&](double v) { return logy ? std::log10(v) : v; };
    double ymin = ty(s.y[0]), ymax = ymin;
    for (double v : s.y) {
        ymin = std::min(ymin, ty(v));
        ymax = std::max(ymax, ty(v));
    }
    if (ymax <= ymin) ymax = ymin + 1;
    std::string pts;
    for (size_t i = 0; i < s.x.size(); ++i) {
        const double px = x0 + (s.x[i] - xmin) / (xmax - xmin) * w;
        const double py = y0 + h - (ty(s.y[i]) - ymin) / (ymax - ymin) * h;
        pts += std::to_string(px) + "," + std::to_string(py) + " ";
    }
    svg += "<polyline points='" + pts + "' fill='none' stroke='#2166ac' stroke-width='1.5'/>\n";
    char lo[40], hi[40];
    std::snprintf(lo, sizeof(lo), "%.3g", s.y.empty() ? 0.0 : *std::min_element(s.y.begin(), s.y.end()));
    std::snprintf(hi, sizeof(hi), "%.3g", s.y.empty() ? 0.0 : *std::max_element(s.y.begin(), s.y.end()));
    svg += "<text x='" + std::to_string(x0 + 4) + "' y='" + std::to_string(y0 + 12) +
           "' font-size='10' fill='#555' font-family='sans-serif'>max " + hi + "</text>\n";
    svg += "<text x='" + std::to_string(x0 + 4) + "' y='" + std::to_string(y0 + h - 4) +
           "' font-size='10' fill='#555' font-family='sans-serif'>min " + lo + "</text>\n";
    svg += "<text x='" + std::to_string(x0 + w - 4) + "' y='" + std::to_string(y0 + h + 14) +
           "' text-anchor='end' font-size='10' fill='#555' font-family='sans-serif'>step " + std::to_string(int64_t(xmax)) +
           (logy ? " (log y)" : "") + "</text>\n";
}

} // namespace detail

// Four-panel learning-curve figure (VRMSE, NEPS low/mid/high vs step).
inline void render_curves_svg(const std::vector<CsvRow>& rows, const std::string& path) {
    auto series = curve_series(rows);
    const double pw = 260, ph = 180, gap = 30, top = 40, bottom = 30;
    const double width = 4 * pw + 5 * gap, height = top + ph + bottom;
    std::string svg = "<svg xmlns='http://www.w3.org/2000/svg' width='" + std::to_string(int(width)) + "' height='" +
                      std::to_string(int(height)) + "'>\n<rect width='100%' height='100%' fill='#fafafa'/>\n";
    const char* metrics_[4] = {"vrmse", "neps_low", "neps_mid", "neps_high"};
    const char* titles[4] = {"VRMSE", "NEPS low", "NEPS mid", "NEPS high"};
    for (int i = 0; i < 4; ++i)
        detail::render_panel(svg, series[metrics_[i]], titles[i], gap + i * (pw + gap), top, pw, ph);
    svg += "</svg>\n";
    std::ofstream os(path);
    if (!os) raise<IoError>("report: cannot write '", path, "'");
    os << svg;
}

} // namespace report
} // namespace physemu
