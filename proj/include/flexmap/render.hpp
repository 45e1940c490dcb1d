#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flexmap/sweep.hpp"

namespace flexmap::render {

struct RenderOptions {
  double scale_kw = 0.0;  // colour scale limit; 0 = shared max |regulation|
  int cell_px = 6;        // pixel size of one grid cell
};

/// One SVG per (unit, channel): consumption in red, production in blue,
/// diverging scale symmetric about zero and shared across all layers,
/// cross-marker at the initial operating point. Cells that did not converge
/// are drawn distinctly from infeasible ones. When a swap-free sweep is
/// given, its feasibility boundary is overlaid dashed.
/// Returns the written file paths.
std::vector<std::filesystem::path> render_heatmaps(
    const sweep::SweepResult& sweep, double base_kw,
    const sweep::SweepResult* swapfree, const RenderOptions& opts,
    const std::filesystem::path& out_dir);

/// Solid boundary of the sweep's feasible area, plus the swap-free boundary
/// dashed when given.
std::filesystem::path render_boundary_overlay(
    const sweep::SweepResult& sweep, double base_kw,
    const sweep::SweepResult* swapfree, const RenderOptions& opts,
    const std::filesystem::path& out_dir);

}  // namespace flexmap::render
