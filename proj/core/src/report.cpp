#include "rsfr/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rsfr/array_io.hpp"

namespace rsfr::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

unsigned char to_byte(double v, double lo, double hi) {
  if (!std::isfinite(v) || !(hi > lo)) return 0;
  return static_cast<unsigned char>(std::lround(255.0 * std::clamp((v - lo) / (hi - lo), 0.0, 1.0)));
}

// blue -> teal -> yellow ramp
std::array<unsigned char, 3> colormap(double t) {
  static const std::array<std::array<double, 3>, 5> stops{{{0.27, 0.00, 0.33}, {0.23, 0.32, 0.55}, {0.13, 0.57, 0.55},
                                                           {0.37, 0.79, 0.38}, {0.99, 0.91, 0.15}}};
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(i);
  std::array<unsigned char, 3> rgb{};
  for (int k = 0; k < 3; ++k) rgb[k] = static_cast<unsigned char>(std::lround(255.0 * ((1 - f) * stops[i][k] + f * stops[i + 1][k])));
  return rgb;
}

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v, int prec = 4) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

Image abs_diff(const Image& a, const Image& b) {
  Image d(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) d.pixels()[i] = std::abs(a.pixels()[i] - b.pixels()[i]);
  return d;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::istringstream in(io::read_text(p));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string c;
    std::istringstream ls(line);
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

void write_pgm(const fs::path& path, const Image& img, double lo, double hi) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (double v : img.pixels()) out.put(static_cast<char>(to_byte(v, lo, hi)));
}

void write_ppm(const fs::path& path, const Image& img, double lo, double hi) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (double v : img.pixels()) {
    std::array<unsigned char, 3> rgb{0, 0, 0};
    if (std::isfinite(v) && hi > lo) rgb = colormap((v - lo) / (hi - lo));
    out.write(reinterpret_cast<const char*>(rgb.data()), 3);
  }
}

Image tile(const std::vector<Image>& tiles, int columns, int gap) {
  if (tiles.empty() || columns <= 0) throw std::invalid_argument("tile: nothing to place");
  const int h = tiles[0].rows(), w = tiles[0].cols();
  const int rows = (static_cast<int>(tiles.size()) + columns - 1) / columns;
  Image out(rows * h + (rows - 1) * gap, columns * w + (columns - 1) * gap, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    if (tiles[t].rows() != h || tiles[t].cols() != w) throw std::invalid_argument("tile: tiles differ in shape");
    const int r0 = static_cast<int>(t) / columns * (h + gap), c0 = static_cast<int>(t) % columns * (w + gap);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) out(r0 + r, c0 + c) = tiles[t](r, c);
    }
  }
  return out;
}

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                     const std::vector<Series>& series, const std::vector<std::string>& notes) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 60;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x1 > x0)) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    o << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << num(xv, 3) << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv, 3) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">" << esc(xlabel) << "</text>\n";
  o << "<text transform=\"translate(18," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << esc(ylabel) << "</text>\n";
  int legend = 0;
  for (const auto& s : series) {
    if (s.line && s.x.size() >= 2) {
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) o << px(s.x[i]) << "," << py(s.y[i]) << " ";
      o << "\"/>\n";
    } else {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2\" fill=\"" << s.color << "\" fill-opacity=\"0.5\"/>\n";
      }
    }
    o << "<text x=\"" << W - R - 150 << "\" y=\"" << T + 14 + 16 * legend++ << "\" fill=\"" << s.color << "\">" << esc(s.label) << "</text>\n";
  }
  for (std::size_t i = 0; i < notes.size(); ++i) {
    o << "<text class=\"note\" x=\"" << L + 10 << "\" y=\"" << T + 14 + 16 * i << "\">" << esc(notes[i]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_bars(const std::string& title, const std::vector<std::string>& categories,
                     const std::vector<std::string>& labels, const std::vector<std::vector<double>>& values) {
  // values[category][label], each category drawn on its own panel scale
  constexpr double PW = 220, H = 320, T = 40, B = 60;
  static const char* colors[] = {"#d95f02", "#7570b3", "#1b9e77", "#e7298a"};
  const double W = PW * static_cast<double>(categories.size()) + 40;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double x0 = 40 + PW * static_cast<double>(c);
    double vmax = 0;
    for (double v : values[c]) vmax = std::max(vmax, std::isfinite(v) ? v : 0.0);
    if (vmax <= 0) vmax = 1;
    const double bw = (PW - 40) / static_cast<double>(labels.size());
    for (std::size_t l = 0; l < labels.size(); ++l) {
      const double v = std::isfinite(values[c][l]) ? values[c][l] : 0.0;
      const double h = v / vmax * (H - T - B - 20);
      const double x = x0 + bw * static_cast<double>(l);
      o << "<rect x=\"" << x << "\" y=\"" << H - B - h << "\" width=\"" << bw - 4 << "\" height=\"" << h << "\" fill=\""
        << colors[l % 4] << "\"/>\n";
      o << "<text x=\"" << x + bw / 2 - 2 << "\" y=\"" << H - B - h - 4 << "\" text-anchor=\"middle\" font-size=\"9\">" << num(v, 3) << "</text>\n";
      o << "<text x=\"" << x + bw / 2 - 2 << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\">" << esc(labels[l]) << "</text>\n";
    }
    o << "<text x=\"" << x0 + (PW - 40) / 2 << "\" y=\"" << H - 20 << "\" text-anchor=\"middle\">" << esc(categories[c]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<fs::path> make_report(const fs::path& out_dir) {
  const fs::path rdir = out_dir / "reconstruct" / "test_0";
  const fs::path pdir = out_dir / "postprocess" / "test_0";
  const fs::path edir = out_dir / "evaluate";
  const fs::path out = out_dir / "report";
  for (const auto& p : {rdir, pdir, edir}) {
    if (!fs::exists(p)) throw Error("report: missing stage output " + p.string());
  }
  fs::create_directories(out);
  std::vector<fs::path> files;

  // reconstruction row and error-map row for the last (most attenuated) slice
  std::size_t k = 0;
  while (fs::exists(rdir / ("gt_" + std::to_string(k + 1) + ".npy"))) ++k;
  const std::string idx = std::to_string(k);
  const Image gt = io::read_image(rdir / ("gt_" + idx + ".npy"));
  std::vector<Image> recon{gt}, errors{Image(gt.rows(), gt.cols(), 0.0)};
  json meta;
  meta["slice"] = k;
  double err_max = 0;
  for (const std::string m : {"zf", "coarse", "refined"}) {
    const Image x = io::read_image(rdir / (m + "_" + idx + ".npy"));
    recon.push_back(x);
    errors.push_back(abs_diff(gt, x));
    const double e = errors.back().max();
    meta["err_max"][m] = e;
    err_max = std::max(err_max, e);
  }
  meta["panel_err_max"] = err_max;
  meta["layout"] = "row 1: gt zf coarse refined; row 2: |gt - x| on a shared [0, panel_err_max] scale";
  std::vector<Image> tiles = recon;
  for (auto& e : errors) {
    // error tiles share the intensity scale of the reconstructions by rescaling to [0, 1]
    for (double& v : e.pixels()) v = err_max > 0 ? v / err_max : 0.0;
    tiles.push_back(e);
  }
  write_pgm(out / "recon_panel.pgm", tile(tiles, 4), 0.0, 1.0);
  io::write_text(out / "recon_panel.json", meta.dump(2) + "\n");
  files.push_back(out / "recon_panel.pgm");

  // MD / FA / HA maps for gt, zf and refined
  std::vector<Image> maps;
  const std::array<std::pair<std::string, std::pair<double, double>>, 3> params{
      {{"md", {0.0, 2e-3}}, {"fa", {0.0, 1.0}}, {"ha", {-90.0, 90.0}}}};
  for (const auto& [p, range] : params) {
    for (const std::string m : {"gt", "zf", "refined"}) {
      Image x = io::read_image(pdir / (m + "_" + p + ".npy"));
      for (double& v : x.pixels()) v = std::isfinite(v) ? std::clamp((v - range.first) / (range.second - range.first), 0.0, 1.0) : v;
      maps.push_back(std::move(x));
    }
  }
  write_ppm(out / "dt_maps.ppm", tile(maps, 3), 0.0, 1.0);
  files.push_back(out / "dt_maps.ppm");

  // HA line profiles with pooled regression annotations
  std::vector<Series> series;
  std::vector<std::string> notes;
  const std::array<std::pair<std::string, std::string>, 2> prof_methods{{{"gt", "#1b9e77"}, {"refined", "#d95f02"}}};
  json fits;
  for (const auto& [m, color] : prof_methods) {
    Series pts{m, {}, {}, color, false};
    for (const auto& row : read_csv_rows(pdir / (m + "_profiles.csv"))) {
      pts.x.push_back(std::stod(row[0]));
      pts.y.push_back(std::stod(row[1]));
    }
    if (pts.x.size() < 2) continue;
    const double n = static_cast<double>(pts.x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < pts.x.size(); ++i) {
      mx += pts.x[i] / n;
      my += pts.y[i] / n;
    }
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < pts.x.size(); ++i) {
      sxx += (pts.x[i] - mx) * (pts.x[i] - mx);
      sxy += (pts.x[i] - mx) * (pts.y[i] - my);
      syy += (pts.y[i] - my) * (pts.y[i] - my);
    }
    const double slope = sxx > 0 ? sxy / sxx : 0, icpt = my - slope * mx;
    double sse = 0;
    for (std::size_t i = 0; i < pts.x.size(); ++i) sse += std::pow(pts.y[i] - icpt - slope * pts.x[i], 2);
    const double r2 = syy > 0 ? std::clamp(1 - sse / syy, 0.0, 1.0) : 0.0, rmse = std::sqrt(sse / n);
    fits[m] = {{"slope", slope}, {"intercept", icpt}, {"r_squared", r2}, {"rmse", rmse}};
    notes.push_back(m + ": R2=" + num(r2, 4) + " RMSE=" + num(rmse, 4) + " deg, slope=" + num(slope, 4) + " deg/depth");
    series.push_back(pts);
    series.push_back({m + " fit", {0.0, 1.0}, {icpt, icpt + slope}, color, true});
  }
  io::write_text(out / "ha_profile.svg", svg_plot("HA line profiles", "normalised wall depth", "helix angle (deg)", series, notes));
  io::write_text(out / "ha_profile.json", fits.dump(2) + "\n");
  files.push_back(out / "ha_profile.svg");

  // MAE bars from the evaluate stage
  std::vector<std::string> labels{"zf", "coarse", "refined"};
  std::vector<std::vector<double>> vals(3, std::vector<double>(labels.size(), 0.0));
  std::vector<int> counts(labels.size(), 0);
  for (const auto& row : read_csv_rows(edir / "dt_mae.csv")) {
    const auto it = std::find(labels.begin(), labels.end(), row[0]);
    if (it == labels.end()) continue;
    const auto l = static_cast<std::size_t>(it - labels.begin());
    for (int c = 0; c < 3; ++c) vals[c][l] += std::stod(row[2 + c]);
    ++counts[l];
  }
  for (int c = 0; c < 3; ++c) {
    for (std::size_t l = 0; l < labels.size(); ++l) vals[c][l] /= std::max(1, counts[l]);
  }
  io::write_text(out / "mae_bars.svg", svg_bars("MAE of global DT parameters", {"MD (mm^2/s)", "FA", "HA gradient (deg/depth)"}, labels, vals));
  files.push_back(out / "mae_bars.svg");
  return files;
}

}  // namespace rsfr::report
