#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "diffuse/error.hpp"
#include "diffuse/eval.hpp"

namespace diffuse {

namespace {

std::string num(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
                          "#393b79", "#637939", "#843c39"};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;

std::string header(const std::string& title, const std::string& data_csv, double w = kW, double h = kH) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w, 0) + "\" height=\"" + num(h, 0) +
       "\" viewBox=\"0 0 " + num(w, 0) + " " + num(h, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<title>" + escape(title) + "</title>\n";
  s += "<metadata><![CDATA[\n" + data_csv + "]]></metadata>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(w / 2, 1) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
       "</text>\n";
  return s;
}

// Log-x when the x range spans more than a decade.
std::string line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series) {
  std::string csv = "series,x,y\n";
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      csv += s.name + "," + format_real(x) + "," + format_real(y) + "\n";
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  const bool logx = xmin > 0 && xmax / xmin > 10.0;
  auto tx = [&](double x) { return logx ? std::log10(x) : x; };
  double x0 = tx(xmin), x1 = tx(xmax);
  if (x1 - x0 < 1e-12) { x0 -= 0.5; x1 += 0.5; }
  ymin = std::min(ymin, 0.0);
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  ymax += 0.05 * (ymax - ymin);
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (tx(x) - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::string s = header(title, csv);
  s += "<rect x=\"" + num(kLeft, 1) + "\" y=\"" + num(kTop, 1) + "\" width=\"" + num(pw, 1) + "\" height=\"" +
       num(ph, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = ymin + (ymax - ymin) * i / 4.0;
    s += "<text x=\"" + num(kLeft - 6, 1) + "\" y=\"" + num(py(y) + 4, 1) + "\" text-anchor=\"end\">" + num(y, 2) +
         "</text>\n";
  }
  std::vector<double> xticks;
  for (const auto& se : series)
    for (auto [x, y] : se.points) xticks.push_back(x);
  std::sort(xticks.begin(), xticks.end());
  xticks.erase(std::unique(xticks.begin(), xticks.end()), xticks.end());
  double last = -1e9;
  for (double x : xticks) {
    if (px(x) - last < 28) continue;
    last = px(x);
    s += "<text x=\"" + num(px(x), 1) + "\" y=\"" + num(kTop + ph + 16, 1) + "\" text-anchor=\"middle\">" +
         format_real(x) + "</text>\n";
  }
  s += "<text x=\"" + num(kLeft + pw / 2, 1) + "\" y=\"" + num(kH - 14, 1) + "\" text-anchor=\"middle\">" +
       escape(xlabel) + (logx ? " (log scale)" : "") + "</text>\n";
  s += "<text x=\"16\" y=\"" + num(kTop + ph / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num(kTop + ph / 2, 1) + ")\">" + escape(ylabel) + "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    std::string pts;
    for (auto [x, y] : series[i].points) pts += num(px(x), 2) + "," + num(py(y), 2) + " ";
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    for (auto [x, y] : series[i].points)
      s += "<circle cx=\"" + num(px(x), 2) + "\" cy=\"" + num(py(y), 2) + "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
    const double ly = kTop + 14 + 16.0 * static_cast<double>(i);
    s += "<line x1=\"" + num(kW - kRight + 12, 1) + "\" y1=\"" + num(ly - 4, 1) + "\" x2=\"" +
         num(kW - kRight + 30, 1) + "\" y2=\"" + num(ly - 4, 1) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(kW - kRight + 36, 1) + "\" y=\"" + num(ly, 1) + "\">" + escape(series[i].name) +
         "</text>\n";
  }
  return s + "</svg>\n";
}

// values[r][c]; NaN cells are left blank.
std::string heat_map(const std::string& title, const std::string& row_label, const std::string& col_label,
                     const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                     const std::vector<std::vector<double>>& values, bool annotate) {
  std::string csv = "row,col,value\n";
  double vmax = 0.0, vmin = INFINITY;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c)
      if (!std::isnan(values[r][c])) {
        csv += rows[r] + "," + cols[c] + "," + format_real(values[r][c]) + "\n";
        vmax = std::max(vmax, values[r][c]);
        vmin = std::min(vmin, values[r][c]);
      }
  if (!std::isfinite(vmin)) vmin = 0.0;
  const double cell = std::clamp(360.0 / static_cast<double>(std::max(rows.size(), cols.size())), 8.0, 48.0);
  const double left = 90, top = 50;
  const double w = left + cell * static_cast<double>(cols.size()) + 40;
  const double h = top + cell * static_cast<double>(rows.size()) + 60;
  std::string s = header(title, csv, w, h);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double y = top + cell * static_cast<double>(r);
    s += "<text x=\"" + num(left - 6, 1) + "\" y=\"" + num(y + cell / 2 + 4, 1) + "\" text-anchor=\"end\">" +
         escape(rows[r]) + "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const double x = left + cell * static_cast<double>(c);
      const double v = values[r][c];
      const double t = std::isnan(v) || vmax <= vmin ? 0.0 : (v - vmin) / (vmax - vmin);
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      s += "<rect x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) + "\" width=\"" + num(cell, 1) + "\" height=\"" +
           num(cell, 1) + "\" fill=\"" + (std::isnan(v) ? std::string("#eeeeee") : std::string(fill)) +
           "\" stroke=\"white\"/>\n";
      if (annotate && !std::isnan(v))
        s += "<text x=\"" + num(x + cell / 2, 1) + "\" y=\"" + num(y + cell / 2 + 4, 1) +
             "\" text-anchor=\"middle\" font-size=\"10\">" + num(v, 2) + "</text>\n";
    }
  }
  const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(30.0 / cell)));
  for (std::size_t c = 0; c < cols.size(); c += step)
    s += "<text x=\"" + num(left + cell * (static_cast<double>(c) + 0.5), 1) + "\" y=\"" +
         num(top + cell * static_cast<double>(rows.size()) + 16, 1) + "\" text-anchor=\"middle\">" + escape(cols[c]) +
         "</text>\n";
  s += "<text x=\"" + num(left + cell * static_cast<double>(cols.size()) / 2, 1) + "\" y=\"" + num(h - 12, 1) +
       "\" text-anchor=\"middle\">" + escape(col_label) + "</text>\n";
  s += "<text x=\"14\" y=\"" + num(top + cell * static_cast<double>(rows.size()) / 2, 1) +
       "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       num(top + cell * static_cast<double>(rows.size()) / 2, 1) + ")\">" + escape(row_label) + "</text>\n";
  return s + "</svg>\n";
}

// Weighted metric grouped by (series key, x).
template <typename SeriesOf, typename XOf>
std::vector<Series> group(const EvalReport& r, SeriesOf series_of, XOf x_of) {
  std::map<std::pair<double, std::string>, std::map<double, std::pair<double, std::size_t>>> acc;
  for (const auto& c : r.cells) {
    auto [order, name] = series_of(c.key);
    auto& slot = acc[{order, name}][x_of(c.key)];
    slot.first += c.metric * static_cast<double>(c.n);
    slot.second += c.n;
  }
  std::vector<Series> out;
  for (const auto& [key, xs] : acc) {
    Series s{key.second, {}};
    for (const auto& [x, v] : xs) s.points.emplace_back(x, v.first / static_cast<double>(v.second));
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<double, std::string> by_snr(const CellKey& k) {
  return {k.snr.value_or(-1.0), k.snr ? "SNR " + format_real(*k.snr) : "noiseless"};
}
std::pair<double, std::string> by_model(const CellKey& k) {
  return {static_cast<double>(model_code(k.model)), std::string(model_name(k.model))};
}
std::pair<double, std::string> by_length(const CellKey& k) {
  return {static_cast<double>(k.length), "L=" + std::to_string(k.length)};
}
double x_length(const CellKey& k) { return static_cast<double>(k.length); }
double x_alpha(const CellKey& k) { return k.alpha; }

std::string confusion_panel(const std::string& title, const Confusion& c) {
  std::vector<std::string> names;
  for (auto m : kAllModels) names.emplace_back(model_name(m));
  std::vector<std::vector<double>> v(kNumModels, std::vector<double>(kNumModels, 0.0));
  for (std::size_t i = 0; i < kNumModels; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < kNumModels; ++j) row += static_cast<double>(c[i][j]);
    for (std::size_t j = 0; j < kNumModels; ++j)
      v[i][j] = row > 0 ? static_cast<double>(c[i][j]) / row : std::nan("");
  }
  return heat_map(title, "true model", "predicted model", names, names, v, true);
}

}  // namespace

std::vector<PlotFile> render_plots(const EvalReport& r) {
  if (r.cells.empty()) throw DomainError("cannot plot an empty report");
  const std::string metric = r.task == Task::Regression ? "MAE" : "micro-F1";
  std::vector<PlotFile> out;
  out.push_back({"metric_vs_length_by_snr.svg",
                 line_plot(metric + " vs trajectory length by SNR", "trajectory length", metric,
                           group(r, by_snr, x_length))});
  out.push_back({"metric_vs_length_by_model.svg",
                 line_plot(metric + " vs trajectory length by model", "trajectory length", metric,
                           group(r, by_model, x_length))});
  out.push_back({"metric_vs_alpha_by_model.svg",
                 line_plot(metric + " vs alpha by model", "alpha", metric, group(r, by_model, x_alpha))});
  out.push_back({"metric_vs_alpha_by_snr.svg",
                 line_plot(metric + " vs alpha by SNR", "alpha", metric, group(r, by_snr, x_alpha))});
  out.push_back({"metric_vs_alpha_by_length.svg",
                 line_plot(metric + " vs alpha by trajectory length", "alpha", metric, group(r, by_length, x_alpha))});

  {
    // Model x length table of the metric.
    std::vector<std::size_t> lengths;
    for (const auto& c : r.cells) lengths.push_back(c.key.length);
    std::sort(lengths.begin(), lengths.end());
    lengths.erase(std::unique(lengths.begin(), lengths.end()), lengths.end());
    std::vector<std::string> rows, cols;
    for (auto m : kAllModels) rows.emplace_back(model_name(m));
    for (auto l : lengths) cols.push_back(std::to_string(l));
    std::vector<std::vector<double>> sum(kNumModels, std::vector<double>(lengths.size(), 0.0));
    std::vector<std::vector<double>> n = sum;
    for (const auto& c : r.cells) {
      const auto j = static_cast<std::size_t>(std::lower_bound(lengths.begin(), lengths.end(), c.key.length) - lengths.begin());
      sum[model_code(c.key.model)][j] += c.metric * static_cast<double>(c.n);
      n[model_code(c.key.model)][j] += static_cast<double>(c.n);
    }
    for (std::size_t i = 0; i < kNumModels; ++i)
      for (std::size_t j = 0; j < lengths.size(); ++j) sum[i][j] = n[i][j] > 0 ? sum[i][j] / n[i][j] : std::nan("");
    out.push_back({"metric_by_model_and_length.svg",
                   heat_map(metric + " by model and trajectory length", "model", "trajectory length", rows, cols, sum,
                            true)});
  }

  if (r.task == Task::Regression) {
    // Row-normalized histogram of predicted alpha per true alpha, 0.1-wide bins over [-0.2, 2.2).
    constexpr int kBins = 24;
    constexpr double kLo = -0.2, kWidth = 0.1;
    std::vector<double> trues;
    for (const auto& p : r.predictions) trues.push_back(p.true_alpha);
    std::sort(trues.begin(), trues.end());
    trues.erase(std::unique(trues.begin(), trues.end()), trues.end());
    std::vector<std::vector<double>> h(trues.size(), std::vector<double>(kBins, 0.0));
    for (const auto& p : r.predictions) {
      const auto i = static_cast<std::size_t>(std::lower_bound(trues.begin(), trues.end(), p.true_alpha) - trues.begin());
      const int b = std::clamp(static_cast<int>(std::floor((p.pred_alpha - kLo) / kWidth)), 0, kBins - 1);
      h[i][b] += 1.0;
    }
    for (auto& row : h) {
      double t = 0.0;
      for (double v : row) t += v;
      if (t > 0)
        for (double& v : row) v /= t;
    }
    std::vector<std::string> rows, cols;
    for (double a : trues) rows.push_back(format_real(a));
    for (int b = 0; b < kBins; ++b) cols.push_back(num(kLo + kWidth * b, 1));
    out.push_back({"alpha_prediction_heatmap.svg",
                   heat_map("predicted alpha distribution per true alpha", "true alpha", "predicted alpha (bin start)",
                            rows, cols, h, false)});
  } else {
    out.push_back({"confusion_all.svg", confusion_panel("confusion matrix, all trajectories", r.confusion)});
    for (const auto& [snr, c] : r.confusion_by_snr)
      out.push_back({"confusion_snr_" + snr + ".svg", confusion_panel("confusion matrix, SNR " + snr, c)});
  }
  return out;
}

void emit_plots(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& p : render_plots(report)) {
    std::ofstream out(dir / p.name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / p.name).string());
    out << p.svg;
  }
}

}  // namespace diffuse
