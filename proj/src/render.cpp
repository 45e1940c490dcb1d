#include "flexmap/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace flexmap::render {

namespace {

constexpr int kMarginLeft = 12;
constexpr int kMarginTop = 30;
constexpr int kMarginBottom = 26;
constexpr int kMarginRight = 12;

// status colours: failures must not read as ordinary infeasibility
constexpr const char* kInfeasible = "#3f3f3f";
constexpr const char* kNotConverged = "#e6b94d";
constexpr const char* kUnsolved = "#d9d9d9";

struct Frame {
  const sweep::GridSpec& g;
  int cell_px;
  int plot_w() const { return g.n_dp() * cell_px; }
  int plot_h() const { return g.n_dq() * cell_px; }
  int width() const { return kMarginLeft + plot_w() + kMarginRight; }
  int height() const { return kMarginTop + plot_h() + kMarginBottom; }
  int cell_x(int ip) const { return kMarginLeft + ip * cell_px; }
  int cell_y(int iq) const {
    return kMarginTop + (g.n_dq() - 1 - iq) * cell_px;
  }
  // continuous p.u. coordinates, cell centres at half-pixel offsets
  double px(double dp) const {
    return kMarginLeft + ((dp - g.dp_min) / g.step + 0.5) * cell_px;
  }
  double py(double dq) const {
    return kMarginTop +
           (g.n_dq() - 0.5 - (dq - g.dq_min) / g.step) * cell_px;
  }
};

std::string diverging(double t) {  // t in [-1, 1]; red + / white 0 / blue -
  t = std::clamp(t, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  if (t >= 0.0) {
    g = static_cast<int>(std::lround(255.0 * (1.0 - t)));
    b = g;
  } else {
    r = static_cast<int>(std::lround(255.0 * (1.0 + t)));
    g = r;
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s)
    out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out.empty() ? std::string("unit") : out;
}

std::ofstream open_svg(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw net::DataError("cannot write " + path.string());
  return out;
}

void svg_open(std::ofstream& out, const Frame& f, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width()
      << "\" height=\"" << f.height() << "\" viewBox=\"0 0 " << f.width()
      << " " << f.height() << "\">\n";
  out << "<rect width=\"" << f.width() << "\" height=\"" << f.height()
      << "\" fill=\"#ffffff\"/>\n";
  out << "<text x=\"" << kMarginLeft << "\" y=\"19\" "
      << "font-family=\"sans-serif\" font-size=\"13\">" << title
      << "</text>\n";
}

void svg_axes(std::ofstream& out, const Frame& f, double base_kw) {
  out << "<rect x=\"" << kMarginLeft << "\" y=\"" << kMarginTop
      << "\" width=\"" << f.plot_w() << "\" height=\"" << f.plot_h()
      << "\" fill=\"none\" stroke=\"#666\" stroke-width=\"1\"/>\n";
  out << "<text x=\"" << kMarginLeft << "\" y=\""
      << kMarginTop + f.plot_h() + 16
      << "\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#444\">"
      << "dP " << num(f.g.dp_min * base_kw) << ".." << num(f.g.dp_max * base_kw)
      << " kW, dQ " << num(f.g.dq_min * base_kw) << ".."
      << num(f.g.dq_max * base_kw) << " kvar</text>\n";
}

void svg_cross(std::ofstream& out, const Frame& f) {
  const auto& g = f.g;
  // initial operating point: zero interface regulation
  if (0.0 < g.dp_min - g.step || 0.0 > g.dp_max + g.step) return;
  if (0.0 < g.dq_min - g.step || 0.0 > g.dq_max + g.step) return;
  double x = f.px(0.0), y = f.py(0.0);
  double a = std::max(4.0, 1.2 * f.cell_px);
  out << "<g stroke=\"#000000\" stroke-width=\"2\">\n";
  out << "<line x1=\"" << num(x - a) << "\" y1=\"" << num(y - a)
      << "\" x2=\"" << num(x + a) << "\" y2=\"" << num(y + a) << "\"/>\n";
  out << "<line x1=\"" << num(x - a) << "\" y1=\"" << num(y + a)
      << "\" x2=\"" << num(x + a) << "\" y2=\"" << num(y - a) << "\"/>\n";
  out << "</g>\n";
}

void svg_boundary(std::ofstream& out, const Frame& f,
                  const sweep::Boundary& b, bool dashed) {
  for (const auto& loop : b.loops) {
    out << "<polyline fill=\"none\" stroke=\"#000000\" stroke-width=\"1.5\"";
    if (dashed) out << " stroke-dasharray=\"6 4\"";
    out << " points=\"";
    for (const auto& p : loop)
      out << num(f.px(p.dp)) << "," << num(f.py(p.dq)) << " ";
    out << "\"/>\n";
  }
}

double shared_scale(const sweep::SweepResult& sw, double base_kw,
                    const RenderOptions& opts) {
  if (opts.scale_kw > 0.0) return opts.scale_kw;
  double m = 0.0;
  for (int c = 0; c < sw.spec.n_cells(); ++c) {
    if (!sw.optimal(c)) continue;
    for (int k = 0; k < sw.n_units; ++k) {
      std::size_t at = static_cast<std::size_t>(c) * sw.n_units + k;
      m = std::max({m, std::abs(sw.delta_p[at]), std::abs(sw.delta_q[at])});
    }
  }
  m *= base_kw;
  return m > 0.0 ? m : 1.0;
}

}  // namespace

std::vector<std::filesystem::path> render_heatmaps(
    const sweep::SweepResult& sweep, double base_kw,
    const sweep::SweepResult* swapfree, const RenderOptions& opts,
    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  Frame f{sweep.spec, std::max(1, opts.cell_px)};
  double scale = shared_scale(sweep, base_kw, opts);

  flexmap::sweep::Boundary sf_boundary;
  if (swapfree) {
    if (!swapfree->spec.same_grid(sweep.spec))
      throw net::DataError("render: swap-free sweep uses a different grid");
    sf_boundary = flexmap::sweep::extract_boundary(*swapfree);
  }

  std::vector<std::filesystem::path> written;
  for (int k = 0; k < sweep.n_units; ++k)
    for (auto ch : {flexmap::sweep::Channel::p, flexmap::sweep::Channel::q}) {
      bool is_p = ch == flexmap::sweep::Channel::p;
      auto layer = flexmap::sweep::heatmap_layer(sweep, k, ch);
      auto path = out_dir / ("heatmap_" + safe_name(sweep.unit_names[k]) +
                             (is_p ? "_p" : "_q") + ".svg");
      auto out = open_svg(path);
      std::string title = "unit " + sweep.unit_names[k] + ", " +
                          (is_p ? "P regulation" : "Q regulation") +
                          " (scale +-" + num(scale) +
                          (is_p ? " kW)" : " kvar)");
      svg_open(out, f, title);
      out << "<g shape-rendering=\"crispEdges\">\n";
      for (int iq = 0; iq < f.g.n_dq(); ++iq)
        for (int ip = 0; ip < f.g.n_dp(); ++ip) {
          int c = sweep.idx(ip, iq);
          std::string fill;
          if (sweep.optimal(c))
            fill = diverging(layer[c] * base_kw / scale);
          else if (!sweep.cells[c].solved)
            fill = kUnsolved;
          else if (sweep.cells[c].status ==
                   flexopf::SolveStatus::not_converged)
            fill = kNotConverged;
          else
            fill = kInfeasible;
          out << "<rect x=\"" << f.cell_x(ip) << "\" y=\"" << f.cell_y(iq)
              << "\" width=\"" << f.cell_px << "\" height=\"" << f.cell_px
              << "\" fill=\"" << fill << "\"/>\n";
        }
      out << "</g>\n";
      if (swapfree) svg_boundary(out, f, sf_boundary, /*dashed=*/true);
      svg_axes(out, f, base_kw);
      svg_cross(out, f);
      out << "</svg>\n";
      if (!out) throw net::DataError("failed writing " + path.string());
      written.push_back(path);
    }
  return written;
}

std::filesystem::path render_boundary_overlay(
    const sweep::SweepResult& sweep, double base_kw,
    const sweep::SweepResult* swapfree, const RenderOptions& opts,
    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  Frame f{sweep.spec, std::max(1, opts.cell_px)};
  auto path = out_dir / "boundary.svg";
  auto out = open_svg(path);
  svg_open(out, f, "feasible-area boundary" +
                       std::string(swapfree ? " (swap-free dashed)" : ""));

  auto full = flexmap::sweep::extract_boundary(sweep);
  svg_boundary(out, f, full, /*dashed=*/false);
  if (full.degenerate)
    out << "<text x=\"" << kMarginLeft << "\" y=\"" << kMarginTop + 16
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#a00\">"
        << full.notice << "</text>\n";
  if (swapfree) {
    if (!swapfree->spec.same_grid(sweep.spec))
      throw net::DataError("render: swap-free sweep uses a different grid");
    auto sf = flexmap::sweep::extract_boundary(*swapfree);
    svg_boundary(out, f, sf, /*dashed=*/true);
  }
  svg_axes(out, f, base_kw);
  svg_cross(out, f);
  out << "</svg>\n";
  if (!out) throw net::DataError("failed writing " + path.string());
  return path;
}

}  // namespace flexmap::render
