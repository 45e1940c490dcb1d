#pragma once

#include <filesystem>
#include <string>

#include "flexmap/analysis.hpp"
#include "flexmap/sweep.hpp"

namespace flexmap::io {

/// Sweep CSV: one row per cell, kW/kVAr externally, fixed column order
///   dp_kw,dq_kvar,status,cost_usd,{p_<unit>_kw,q_<unit>_kvar}...,
///   vmin_pu,vmin_bus,restarts,interface_err_kva
/// Rows iterate dq ascending (outer), dp ascending (inner). Numeric fields
/// of cells without a usable solver state are left empty.
std::string sweep_csv_header(const sweep::SweepResult& sweep);
void write_sweep_csv(const sweep::SweepResult& sweep, double base_kw,
                     const std::filesystem::path& path);
std::string sweep_meta_json(const sweep::SweepResult& sweep, double base_kw);
void write_sweep_meta(const sweep::SweepResult& sweep, double base_kw,
                      const std::filesystem::path& path);

/// Reads a sweep CSV (plus its sidecar .meta json when present) back into a
/// SweepResult. base_kw recovers the p.u. scale; it must match the base the
/// file was written with (taken from the sidecar when available).
sweep::SweepResult read_sweep_csv(const std::filesystem::path& csv_path,
                                  double base_kw = 0.0);

/// Sidecar path convention: <dir>/<stem>_meta.json
std::filesystem::path meta_path_for(const std::filesystem::path& csv_path);

void write_report_json(const analysis::AreaReport& full_report,
                       const sweep::SweepResult& full_sweep,
                       const analysis::AreaReport* swapfree_report,
                       const sweep::SweepResult* swapfree_sweep,
                       double base_kw, const std::filesystem::path& path);
void write_swaps_csv(const std::vector<analysis::SwapCell>& swaps,
                     const sweep::SweepResult& sweep, double base_kw,
                     const std::filesystem::path& path);
void write_shifts_csv(const std::vector<analysis::ShiftHotspot>& shifts,
                      const sweep::SweepResult& sweep, double base_kw,
                      const std::filesystem::path& path);

}  // namespace flexmap::io
