#include "prol/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prol/errors.hpp"

namespace prol {

double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw contract_error("mean of empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
    double m = mean_of(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

void write_ledger_csv(const std::filesystem::path& path, const MetricsLedger& ledger) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write ledger: " + path.string());
    out << "task_i,after_t,accuracy\n";
    for (int t = 1; t <= ledger.completed(); ++t)
        for (int i = 1; i <= t; ++i) out << i << "," << t << "," << ledger.at(i, t) << "\n";
}

MetricsLedger read_ledger_csv(const std::filesystem::path& path, int task_count) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot read ledger: " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "task_i,after_t,accuracy") throw io_error("unexpected ledger header in " + path.string());
    std::vector<std::vector<double>> cols;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        int i, t;
        double acc;
        char comma;
        if (!(ss >> i >> comma >> t >> comma >> acc)) throw io_error("bad ledger row: " + line);
        if (t > static_cast<int>(cols.size())) cols.resize(t);
        if (i > static_cast<int>(cols[t - 1].size())) cols[t - 1].resize(i);
        cols[t - 1][i - 1] = acc;
    }
    MetricsLedger ledger(task_count);
    for (auto& c : cols) ledger.add_column(std::move(c));
    return ledger;
}

void write_metrics_json(const std::filesystem::path& path, double faa, double caa, double ffm,
                        const std::vector<double>& aa) {
    nlohmann::ordered_json j;
    j["FAA"] = faa;
    j["CAA"] = caa;
    j["FFM"] = ffm;
    j["AA"] = aa;
    std::ofstream out(path);
    if (!out) throw io_error("cannot write metrics: " + path.string());
    out << j.dump(2) << "\n";
}

void write_timing_json(const std::filesystem::path& path, const std::vector<TimingRecord>& records) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : records) {
        j.push_back({{"task", r.task_id},
                     {"samples", r.samples},
                     {"train_seconds", r.train_seconds},
                     {"inference_seconds", r.infer_seconds},
                     {"throughput", r.throughput}});
    }
    std::ofstream out(path);
    if (!out) throw io_error("cannot write timing: " + path.string());
    out << j.dump(2) << "\n";
}

void write_accuracy_curve_csv(const std::filesystem::path& path, int task_count,
                              const std::vector<CurveRow>& rows) {
    for (const auto& row : rows)
        if (static_cast<int>(row.values.size()) != task_count)
            throw contract_error("accuracy curve row '" + row.label + "' has " +
                                 std::to_string(row.values.size()) + " entries, expected " +
                                 std::to_string(task_count));
    std::ofstream out(path);
    if (!out) throw io_error("cannot write table: " + path.string());
    out << "label";
    for (int t = 1; t <= task_count; ++t) out << ",task" << t;
    out << ",AVG\n";
    for (const auto& row : rows) {
        out << row.label;
        for (double v : row.values) out << "," << v;
        out << "," << mean_of(row.values) << "\n";
    }
}

void write_line_plot_svg(const std::filesystem::path& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const PlotSeries& series) {
    if (series.x.size() != series.mean.size())
        throw contract_error("plot series: x and mean lengths disagree");
    if (!series.band.empty() && series.band.size() != series.mean.size())
        throw contract_error("plot series: band length disagrees");

    const double W = 640, H = 400, ml = 60, mr = 20, mt = 40, mb = 50;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!series.x.empty()) {
        xmin = *std::min_element(series.x.begin(), series.x.end());
        xmax = *std::max_element(series.x.begin(), series.x.end());
        ymin = 1e300;
        ymax = -1e300;
        for (std::size_t i = 0; i < series.mean.size(); ++i) {
            double lo = series.mean[i] - (series.band.empty() ? 0.0 : series.band[i]);
            double hi = series.mean[i] + (series.band.empty() ? 0.0 : series.band[i]);
            ymin = std::min(ymin, lo);
            ymax = std::max(ymax, hi);
        }
    }
    if (xmax == xmin) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    double pad = (ymax - ymin) * 0.08;
    if (pad == 0.0) pad = std::max(1.0, std::abs(ymax) * 0.1);
    ymin -= pad;
    ymax += pad;

    auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
        << "</text>\n";

    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        double yv = ymin + (ymax - ymin) * k / 4.0;
        double yy = py(yv);
        svg << "<line x1=\"" << ml - 4 << "\" y1=\"" << yy << "\" x2=\"" << ml << "\" y2=\"" << yy
            << "\" stroke=\"black\"/>\n";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", yv);
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << yy + 4
            << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
    }
    for (std::size_t i = 0; i < series.x.size(); ++i) {
        double xx = px(series.x[i]);
        svg << "<line x1=\"" << xx << "\" y1=\"" << H - mb << "\" x2=\"" << xx << "\" y2=\"" << H - mb + 4
            << "\" stroke=\"black\"/>\n";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", series.x[i]);
        svg << "<text x=\"" << xx << "\" y=\"" << H - mb + 18
            << "\" text-anchor=\"middle\" font-size=\"11\">" << buf << "</text>\n";
    }
    svg << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12
        << "\" text-anchor=\"middle\" font-size=\"13\">" << x_label << "</text>\n";
    svg << "<text x=\"16\" y=\"" << (mt + H - mb) / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
        << (mt + H - mb) / 2 << ")\">" << y_label << "</text>\n";

    if (!series.band.empty() && series.x.size() > 1) {
        svg << "<polygon fill=\"#4878cf\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
        for (std::size_t i = 0; i < series.x.size(); ++i)
            svg << px(series.x[i]) << "," << py(series.mean[i] + series.band[i]) << " ";
        for (std::size_t i = series.x.size(); i-- > 0;)
            svg << px(series.x[i]) << "," << py(series.mean[i] - series.band[i]) << " ";
        svg << "\"/>\n";
    }
    if (series.x.size() > 1) {
        svg << "<polyline fill=\"none\" stroke=\"#4878cf\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < series.x.size(); ++i)
            svg << px(series.x[i]) << "," << py(series.mean[i]) << " ";
        svg << "\"/>\n";
    }
    for (std::size_t i = 0; i < series.x.size(); ++i)
        svg << "<circle cx=\"" << px(series.x[i]) << "\" cy=\"" << py(series.mean[i])
            << "\" r=\"3\" fill=\"#4878cf\"/>\n";
    svg << "</svg>\n";

    std::ofstream out(path);
    if (!out) throw io_error("cannot write plot: " + path.string());
    out << svg.str();
}

}  // namespace prol
