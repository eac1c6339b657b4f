#include "shufflepoint/complexity.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdio>

#include <json.hpp>

namespace spn {

namespace {

void check_group(const std::string& where, Index g, Index c_in, Index c_out) {
  if (g < 1) throw ConfigError(where + ": group count must be positive");
  if (c_in % g != 0)
    throw ConfigError(where + ": group count " + std::to_string(g) + " does not divide input channels " +
                      std::to_string(c_in));
  if (c_out % g != 0)
    throw ConfigError(where + ": group count " + std::to_string(g) + " does not divide output channels " +
                      std::to_string(c_out));
}

}  // namespace

std::int64_t layer_params(Index c_in, Index c_out, Index g) {
  check_group("layer_params", g, c_in, c_out);
  return static_cast<std::int64_t>(c_in) * static_cast<std::int64_t>(c_out) / static_cast<std::int64_t>(g);
}

std::int64_t layer_flops(Index n, Index k, Index c_in, Index c_out, Index g) {
  if (n < 1 || k < 1) throw ConfigError("layer_flops: n and k must be at least 1");
  check_group("layer_flops", g, c_in, c_out);
  return static_cast<std::int64_t>(n) * static_cast<std::int64_t>(k) * static_cast<std::int64_t>(c_in) *
         static_cast<std::int64_t>(c_out) / static_cast<std::int64_t>(g);
}

ComplexityReport model_complexity(const ModelConfig& cfg, ModelKind kind, Index n_points) {
  if (n_points < 1) throw ConfigError("model_complexity: n_points must be positive");
  ComplexityReport rep;
  Index c = cfg.in_channels;
  Index points = n_points;
  std::vector<Index> stage_points;  // retained counts, for the decoder walk

  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& sc = cfg.stages[s];
    Index c_in = edge_feature_channels(sc.sgc.edge_variant, c);
    for (std::size_t l = 0; l < sc.sgc.mlp_widths.size(); ++l) {
      const Index c_out = sc.sgc.mlp_widths[l];
      const std::string id = "stage" + std::to_string(s) + ".layer" + std::to_string(l);
      check_group(id, sc.sgc.g, c_in, c_out);
      LayerRow row;
      row.id = id;
      row.grouped = true;
      const std::int64_t weight_params = layer_params(c_in, c_out, sc.sgc.g);
      row.params = weight_params + c_out /*bias*/ + 2 * c_out /*bn*/;
      row.flops = layer_flops(sc.n_out, sc.k, c_in, c_out, sc.sgc.g);
      rep.grouped_params += weight_params;
      rep.grouped_flops += row.flops;
      // Bias add + eval-mode BN (scale+shift) + ReLU per output element,
      // informational only.
      rep.other_ops += static_cast<std::int64_t>(sc.n_out) * sc.k * c_out * 4;
      rep.rows.push_back(std::move(row));
      c_in = c_out;
    }
    c = sc.sgc.mlp_widths.back();
    // Neighbor max-pool comparisons.
    rep.other_ops += static_cast<std::int64_t>(sc.n_out) * (sc.k - 1) * c;
    points = sc.n_out;
    stage_points.push_back(points);
  }

  if (kind == ModelKind::classifier) {
    rep.other_ops += (points - 1) * c;  // global max-pool
    Index c_in = c;
    for (std::size_t h = 0; h <= cfg.head_widths.size(); ++h) {
      const Index c_out = h < cfg.head_widths.size() ? cfg.head_widths[h] : cfg.n_classes;
      LayerRow row;
      row.id = "head" + std::to_string(h);
      row.params = static_cast<std::int64_t>(c_in) * c_out + c_out;
      row.flops = static_cast<std::int64_t>(c_in) * c_out;  // one row after pooling
      rep.other_ops += c_out;
      rep.rows.push_back(std::move(row));
      c_in = c_out;
    }
  } else {
    if (cfg.seg_up_widths.size() != cfg.stages.size())
      throw ConfigError("model_complexity: need one decoder width per stage");
    Index carried = c;
    for (std::size_t d = 0; d < cfg.seg_up_widths.size(); ++d) {
      const std::size_t target = cfg.stages.size() - 1 - d;
      const Index fine_n = target == 0 ? n_points : stage_points[target - 1];
      const Index skip_c = target == 0 ? cfg.in_channels
                                       : cfg.stages[target - 1].sgc.mlp_widths.back();
      const Index c_in = carried + skip_c;
      const Index c_out = cfg.seg_up_widths[d];
      LayerRow row;
      row.id = "up" + std::to_string(d);
      row.params = static_cast<std::int64_t>(c_in) * c_out + c_out + 2 * c_out;
      row.flops = static_cast<std::int64_t>(fine_n) * c_in * c_out;
      rep.other_ops += static_cast<std::int64_t>(fine_n) * c_out * 4;
      rep.rows.push_back(std::move(row));
      carried = c_out;
    }
    LayerRow head;
    head.id = "seg_head";
    head.params = static_cast<std::int64_t>(carried) * cfg.n_classes + cfg.n_classes;
    head.flops = static_cast<std::int64_t>(n_points) * carried * cfg.n_classes;
    rep.other_ops += static_cast<std::int64_t>(n_points) * cfg.n_classes;
    rep.rows.push_back(std::move(head));
  }

  for (const auto& row : rep.rows) {
    rep.params += row.params;
    rep.flops += row.flops;
  }
  return rep;
}

Index parameter_census(Model& model) {
  Index n = 0;
  for (const auto& p : model.parameters()) n += p.tensor->size();
  return n;
}

TimingSummary measure_forward_time(Model& model, const PointCloud& cloud, int trials, int warmup) {
  if (trials < 3) throw ConfigError("measure_forward_time: need at least 3 trials");
  using clock = std::chrono::steady_clock;
  TimingSummary t;
  for (int i = 0; i < warmup + trials; ++i) {
    const auto t0 = clock::now();
    Tape tape;
    forward(model, cloud, tape, {});
    const auto t1 = clock::now();
    if (i >= warmup)
      t.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = t.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  auto median_of = [](const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    const std::size_t n = hi - lo;
    return n % 2 ? v[lo + n / 2] : 0.5 * (v[lo + n / 2 - 1] + v[lo + n / 2]);
  };
  const std::size_t n = sorted.size();
  t.median_ms = median_of(sorted, 0, n);
  t.q1_ms = median_of(sorted, 0, n / 2);
  t.q3_ms = median_of(sorted, n % 2 ? n / 2 + 1 : n / 2, n);
  t.iqr_ms = t.q3_ms - t.q1_ms;
  return t;
}

std::vector<SweepRow> sweep_groups(const ModelConfig& base, ModelKind kind, Index n_points,
                                   const std::vector<Index>& group_counts) {
  std::vector<SweepRow> rows;
  for (Index g : group_counts) {
    ModelConfig cfg = base;
    for (auto& sc : cfg.stages) sc.sgc.g = g;
    const ComplexityReport rep = model_complexity(cfg, kind, n_points);
    rows.push_back({g, rep.params, rep.flops, rep.grouped_flops});
  }
  return rows;
}

namespace {

nlohmann::json report_to_json(const ComplexityReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json row;
    row["id"] = r.id;
    row["params"] = r.params;
    row["flops"] = r.flops;
    row["grouped"] = r.grouped;
    rows.push_back(std::move(row));
  }
  nlohmann::json j;
  j["rows"] = std::move(rows);
  j["params"] = rep.params;
  j["flops"] = rep.flops;
  j["grouped_params"] = rep.grouped_params;
  j["grouped_flops"] = rep.grouped_flops;
  j["other_ops"] = rep.other_ops;
  if (rep.timing) {
    nlohmann::json t;
    t["median_ms"] = rep.timing->median_ms;
    t["q1_ms"] = rep.timing->q1_ms;
    t["q3_ms"] = rep.timing->q3_ms;
    t["iqr_ms"] = rep.timing->iqr_ms;
    t["samples_ms"] = rep.timing->samples_ms;
    j["timing"] = std::move(t);
  }
  return j;
}

}  // namespace

std::string report_json(const ComplexityReport& report) { return report_to_json(report).dump(2); }

std::string report_table(const ComplexityReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %14s %16s %8s\n", "layer", "params", "flops", "grouped");
  out += line;
  out += std::string(58, '-') + "\n";
  for (const auto& r : report.rows) {
    std::snprintf(line, sizeof line, "%-18s %14" PRId64 " %16" PRId64 " %8s\n", r.id.c_str(), r.params,
                  r.flops, r.grouped ? "yes" : "no");
    out += line;
  }
  out += std::string(58, '-') + "\n";
  std::snprintf(line, sizeof line, "%-18s %14" PRId64 " %16" PRId64 "\n", "total", report.params,
                report.flops);
  out += line;
  std::snprintf(line, sizeof line, "%-18s %14" PRId64 " %16" PRId64 "\n", "grouped subtotal",
                report.grouped_params, report.grouped_flops);
  out += line;
  std::snprintf(line, sizeof line, "%-18s %14s %16" PRId64 "  (bias/bn/act/pool, not in total)\n",
                "other ops", "", report.other_ops);
  out += line;
  if (report.timing) {
    std::snprintf(line, sizeof line, "forward time: median %.3f ms, IQR %.3f ms (q1 %.3f, q3 %.3f)\n",
                  report.timing->median_ms, report.timing->iqr_ms, report.timing->q1_ms,
                  report.timing->q3_ms);
    out += line;
    out += "timing is environment-dependent; compare only within one machine\n";
  }
  return out;
}

std::string sweep_json(const std::vector<SweepRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["groups"] = r.g;
    row["params"] = r.params;
    row["flops"] = r.flops;
    row["grouped_flops"] = r.grouped_flops;
    arr.push_back(std::move(row));
  }
  return arr.dump(2);
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%6s %14s %16s %16s\n", "groups", "params", "flops", "grouped_flops");
  out += line;
  out += std::string(55, '-') + "\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%6lld %14" PRId64 " %16" PRId64 " %16" PRId64 "\n",
                  static_cast<long long>(r.g), r.params, r.flops, r.grouped_flops);
    out += line;
  }
  return out;
}

}  // namespace spn
