#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "edmips/search.hpp"

namespace edmips::report {

struct Series {
  std::string label;
  std::vector<std::pair<Real, Real>> points;
  std::string color = "#1f77b4";
  bool line = true;
  bool markers = false;
  bool dashed = false;
};

struct Panel {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  std::vector<Series> series;
  std::optional<std::pair<Real, Real>> yrange;
};

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return p;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace detail {

inline std::string num(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(Real v) {
  char buf[32];
  const Real a = std::abs(v);
  if (a != 0 && (a >= 1e5 || a < 1e-2)) std::snprintf(buf, sizeof buf, "%.2g", v);
  else std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Panel at (ox, oy) of size w x h.
inline void draw_panel(std::ostringstream& os, const Panel& p, Real ox, Real oy, Real w, Real h) {
  const Real ml = 58, mr = 12, mt = 26, mb = 40;
  const Real pw = w - ml - mr, ph = h - mt - mb;
  Real x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : p.series) {
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  if (p.yrange) y0 = p.yrange->first, y1 = p.yrange->second;
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto X = [&](Real x) { return ox + ml + (x - x0) / (x1 - x0) * pw; };
  auto Y = [&](Real y) { return oy + mt + ph - (y - y0) / (y1 - y0) * ph; };

  os << "<g>\n";
  os << "<text x=\"" << num(ox + w / 2) << "\" y=\"" << num(oy + 16)
     << "\" text-anchor=\"middle\" font-size=\"13\">" << xml_escape(p.title) << "</text>\n";
  os << "<rect x=\"" << num(ox + ml) << "\" y=\"" << num(oy + mt) << "\" width=\"" << num(pw)
     << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const Real xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
    os << "<text x=\"" << num(X(xv)) << "\" y=\"" << num(oy + mt + ph + 14)
       << "\" text-anchor=\"middle\" font-size=\"10\">" << tick_label(xv) << "</text>\n";
    os << "<text x=\"" << num(ox + ml - 4) << "\" y=\"" << num(Y(yv) + 3)
       << "\" text-anchor=\"end\" font-size=\"10\">" << tick_label(yv) << "</text>\n";
    os << "<line x1=\"" << num(ox + ml) << "\" y1=\"" << num(Y(yv)) << "\" x2=\"" << num(ox + ml + pw)
       << "\" y2=\"" << num(Y(yv)) << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << num(ox + ml + pw / 2) << "\" y=\"" << num(oy + h - 6)
     << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(p.xlabel) << "</text>\n";
  os << "<text transform=\"translate(" << num(ox + 12) << "," << num(oy + mt + ph / 2)
     << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(p.ylabel)
     << "</text>\n";

  Real ly = oy + mt + 12;
  for (const auto& s : p.series) {
    if (s.line && s.points.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.6\""
         << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
      for (auto [x, y] : s.points) os << num(X(x)) << ',' << num(Y(y)) << ' ';
      os << "\"/>\n";
    }
    if (s.markers || s.points.size() == 1) {
      for (auto [x, y] : s.points) {
        os << "<circle cx=\"" << num(X(x)) << "\" cy=\"" << num(Y(y)) << "\" r=\"3.2\" fill=\""
           << s.color << "\"/>\n";
      }
    }
    if (!s.label.empty()) {
      os << "<text x=\"" << num(ox + ml + pw - 6) << "\" y=\"" << num(ly)
         << "\" text-anchor=\"end\" font-size=\"10\" fill=\"" << s.color << "\">"
         << xml_escape(s.label) << "</text>\n";
      ly += 12;
    }
  }
  os << "</g>\n";
}

}  // namespace detail

/// Lays panels out on a grid and returns the SVG document.
inline std::string render_svg(const std::vector<Panel>& panels, std::size_t columns = 3,
                              Real panel_w = 320, Real panel_h = 220) {
  if (panels.empty()) throw Error("render_svg: nothing to draw");
  columns = std::max<std::size_t>(1, std::min(columns, panels.size()));
  const std::size_t rows = (panels.size() + columns - 1) / columns;
  const Real W = panel_w * static_cast<Real>(columns), H = panel_h * static_cast<Real>(rows);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(W) << "\" height=\""
     << detail::num(H) << "\" viewBox=\"0 0 " << detail::num(W) << ' ' << detail::num(H)
     << "\" font-family=\"sans-serif\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    detail::draw_panel(os, panels[i], panel_w * static_cast<Real>(i % columns),
                       panel_h * static_cast<Real>(i / columns), panel_w, panel_h);
  }
  os << "</svg>\n";
  return os.str();
}

/// One panel per layer with one curve per candidate bit-width.
/// `bit_labels[k]` holds the pool bit-widths of layer k for this kind.
inline std::string evolution_svg(const std::vector<PiRecord>& records, QuantizerKind kind,
                                 const std::vector<std::vector<int>>& bit_labels,
                                 const std::vector<std::string>& layer_names = {}) {
  std::map<std::size_t, std::vector<const PiRecord*>> by_layer;
  for (const auto& r : records) {
    if (r.kind == kind) by_layer[r.layer_id].push_back(&r);
  }
  if (by_layer.empty()) throw Error("evolution_svg: no records of the requested kind");
  const char* prefix = kind == QuantizerKind::weight ? "W" : "A";
  std::vector<Panel> panels;
  for (const auto& [layer, rows] : by_layer) {
    Panel p;
    p.title = "layer " + std::to_string(layer) +
              (layer < layer_names.size() ? " " + layer_names[layer] : std::string());
    p.xlabel = "epoch";
    p.ylabel = kind == QuantizerKind::weight ? "pi (weights)" : "pi (activations)";
    p.yrange = {0, 1};
    const std::size_t n = rows.front()->pi.size();
    for (std::size_t i = 0; i < n; ++i) {
      Series s;
      s.color = palette()[i % palette().size()];
      s.label = prefix + (layer < bit_labels.size() && i < bit_labels[layer].size()
                              ? std::to_string(bit_labels[layer][i])
                              : "#" + std::to_string(i + 1));
      for (const auto* r : rows) {
        if (i < r->pi.size()) s.points.emplace_back(static_cast<Real>(r->epoch), r->pi[i]);
      }
      p.series.push_back(std::move(s));
    }
    panels.push_back(std::move(p));
  }
  return render_svg(panels, std::min<std::size_t>(4, panels.size()));
}

/// Expected-cost and loss evolution, plus accuracy against BitOps for the
/// retrained models with the uniform-precision baselines overlaid. The
/// accuracy panel requires at least one baseline.
inline std::string summary_svg(const std::vector<EpochRecord>& epochs,
                               const std::vector<std::pair<std::string, std::pair<Real, Real>>>& mixed,
                               const std::vector<std::pair<std::string, std::pair<Real, Real>>>& baselines) {
  std::vector<Panel> panels;
  if (!epochs.empty()) {
    Panel cost{"expected normalized cost", "epoch", "cost", {}, {}};
    Series c{"expected cost", {}, palette()[0], true, true, false};
    for (const auto& e : epochs) c.points.emplace_back(static_cast<Real>(e.epoch), e.expected_cost);
    cost.series.push_back(std::move(c));
    panels.push_back(std::move(cost));
    Panel loss{"training loss", "epoch", "cross-entropy", {}, {}};
    Series l{"train loss", {}, palette()[1], true, true, false};
    for (const auto& e : epochs) l.points.emplace_back(static_cast<Real>(e.epoch), e.train_loss);
    loss.series.push_back(std::move(l));
    panels.push_back(std::move(loss));
  }
  if (!mixed.empty() && baselines.empty()) {
    throw Error("summary_svg: accuracy-vs-BitOps needs the uniform baselines");
  }
  if (!baselines.empty()) {
    Panel acc{"top-1 accuracy vs BitOps", "BitOps", "accuracy (%)", {}, {}};
    auto sorted = baselines;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.second.first < b.second.first; });
    Series u{"uniform", {}, palette()[7], true, true, true};
    for (const auto& [label, pt] : sorted) u.points.emplace_back(pt.first, 100 * pt.second);
    acc.series.push_back(std::move(u));
    std::size_t i = 0;
    for (const auto& [label, pt] : mixed) {
      acc.series.push_back({label, {{pt.first, 100 * pt.second}}, palette()[(3 + i++) % palette().size()],
                            false, true, false});
    }
    panels.push_back(std::move(acc));
  }
  if (panels.empty()) throw Error("summary_svg: nothing to draw");
  return render_svg(panels, panels.size());
}

}  // namespace edmips::report
