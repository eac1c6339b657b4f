#pragma once

#include <optional>
#include <string>
#include <vector>

#include "shufflepoint/model.hpp"

namespace spn {

// Analytic weight count of one grouped 1x1 convolution: c_in*c_out/g.
std::int64_t layer_params(Index c_in, Index c_out, Index g);

// Analytic multiply-add count of that layer over n positions with k
// neighbors: n*k*c_in*c_out/g. One multiply-add counts as one FLOP.
std::int64_t layer_flops(Index n, Index k, Index c_in, Index c_out, Index g);

struct LayerRow {
  std::string id;
  std::int64_t params = 0;  // weights + bias + BN affine for this layer
  std::int64_t flops = 0;   // weight multiply-adds only
  bool grouped = false;     // true for the grouped SGC layers
};

struct TimingSummary {
  std::vector<double> samples_ms;
  double median_ms = 0;
  double q1_ms = 0;
  double q3_ms = 0;
  double iqr_ms = 0;
};

// Totals equal the sum of rows exactly. Bias adds, batch-norm, activations,
// and pooling are excluded from `flops` and reported in `other_ops` instead,
// keeping the total comparable to the analytic formula.
struct ComplexityReport {
  std::vector<LayerRow> rows;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t grouped_params = 0;  // Eq-style weight count of grouped layers
  std::int64_t grouped_flops = 0;
  std::int64_t other_ops = 0;
  std::optional<TimingSummary> timing;
};

// Analytic report straight from the config; `n_points` is the input cloud
// size. A config with zero stages degenerates to the bare head.
ComplexityReport model_complexity(const ModelConfig& cfg, ModelKind kind, Index n_points);

// Direct enumeration of every learnable array; the analytic `params` total
// must match this for any built model.
Index parameter_census(Model& model);

// Median/IQR of eval-mode forward wall time; single-threaded, monotonic
// clock, warmup discarded. Absolute numbers are environment-dependent.
TimingSummary measure_forward_time(Model& model, const PointCloud& cloud, int trials, int warmup = 2);

struct SweepRow {
  Index g = 1;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t grouped_flops = 0;
};

// Same architecture at different group counts; throws ConfigError naming the
// first layer whose channels a group count does not divide.
std::vector<SweepRow> sweep_groups(const ModelConfig& base, ModelKind kind, Index n_points,
                                   const std::vector<Index>& group_counts);

std::string report_json(const ComplexityReport& report);
std::string report_table(const ComplexityReport& report);
std::string sweep_json(const std::vector<SweepRow>& rows);
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace spn
