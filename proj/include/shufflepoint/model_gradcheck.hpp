#pragma once

#include <memory>
#include <vector>

#include "shufflepoint/gradcheck.hpp"
#include "shufflepoint/model.hpp"
#include "shufflepoint/rng.hpp"
#include "shufflepoint/training.hpp"

namespace spn {

namespace detail {

inline RowMatrixXd gc_random_points(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  RowMatrixXd pts(n, 3);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 3; ++j) pts(i, j) = dist(rng);
  return pts;
}

}  // namespace detail

// Composite finite-difference cases: interpolation and edge-feature
// assembly, a grouped unit with batch norm, and small end-to-end models
// differentiated against their own weights. Point geometry stays fixed while
// values are probed, so the discrete sampling/neighbor choices cannot jump.
inline std::vector<GradCheckCase> model_gradcheck_cases(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  auto add = [&cases](std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({std::move(name), std::move(run)});
  };

  add("apply_interpolation", [seed] {
    std::mt19937_64 rng(seed + 101);
    const RowMatrixXd coarse = detail::gc_random_points(6, rng);
    const RowMatrixXd fine = detail::gc_random_points(10, rng);
    const InterpWeights w = interpolation_weights(coarse, fine);
    auto feats = detail::gc_random({6, 4}, -1, 1, rng);
    return finite_difference_check<double>(
        [w](Tape& t, const TensorPtr& in) {
          auto y = ops::apply_interpolation(t, in, w);
          return ops::sum(t, ops::mul(t, y, y));
        },
        feats);
  });

  add("edge_features/features", [seed] {
    std::mt19937_64 rng(seed + 102);
    PointCloud cloud;
    cloud.data = detail::gc_random_points(8, rng);
    const NeighborIndex nbrs = knn_search(cloud, 3);
    auto feats = detail::gc_random({8, 5}, -1, 1, rng);
    return finite_difference_check<double>(
        [nbrs](Tape& t, const TensorPtr& in) {
          auto y = ops::build_edge_features(t, in, nbrs, EdgeFeatureVariant::CenterNeighborRelative);
          return ops::sum(t, ops::mul(t, y, y));
        },
        feats);
  });

  add("sgc_unit/input", [seed] {
    std::mt19937_64 rng(seed + 103);
    SgcUnitConfig cfg;
    cfg.g = 2;
    cfg.mlp_widths = {4, 6};
    auto unit = std::make_shared<SgcUnit>(SgcUnit::init("gc", cfg, 6, true, rng));
    auto edge = detail::gc_random({5, 4, 6}, -1, 1, rng);
    return finite_difference_check<double>(
        [unit](Tape& t, const TensorPtr& in) {
          auto y = ops::sgc_unit_forward(t, in, *unit, true);
          return ops::sum(t, ops::mul(t, y, y));
        },
        edge, 1e-5);
  });

  add("sgc_unit/layer0_weights", [seed] {
    std::mt19937_64 rng(seed + 104);
    SgcUnitConfig cfg;
    cfg.g = 2;
    cfg.mlp_widths = {4, 6};
    auto unit = std::make_shared<SgcUnit>(SgcUnit::init("gc", cfg, 6, true, rng));
    auto edge = detail::gc_random({5, 4, 6}, -1, 1, rng);
    auto w0 = unit->layers[0].weights[0];
    return finite_difference_check<double>(
        [unit, edge](Tape& t, const TensorPtr& in) {
          unit->layers[0].weights[0] = in;
          auto y = ops::sgc_unit_forward(t, edge, *unit, true);
          return ops::sum(t, ops::mul(t, y, y));
        },
        w0, 1e-5);
  });

  add("classifier/layer0_weights", [seed] {
    auto model = std::make_shared<Model>(build_classifier(tiny_classifier_config(4), seed + 105));
    const PointCloud cloud = synth_dataset(1, 32, seed + 106)[0];
    const std::vector<std::int64_t> labels = {cloud.labels[0]};
    auto w0 = model->stages[0].sgc.layers[0].weights[0];
    const std::uint64_t drop_seed = mix_seed(seed, "dropout", 105);
    return finite_difference_check<double>(
        [model, cloud, labels, drop_seed](Tape& t, const TensorPtr& in) {
          model->stages[0].sgc.layers[0].weights[0] = in;
          ForwardOptions opts;
          opts.training = true;
          opts.dropout_seed = drop_seed;
          auto res = forward(*model, cloud, t, opts);
          return ops::softmax_cross_entropy(t, res.logits, labels);
        },
        w0, 1e-5);
  });

  add("classifier/head_bias", [seed] {
    auto model = std::make_shared<Model>(build_classifier(tiny_classifier_config(4), seed + 107));
    const PointCloud cloud = synth_dataset(1, 32, seed + 108)[0];
    const std::vector<std::int64_t> labels = {cloud.labels[0]};
    auto bias = model->head.back().b;
    const std::uint64_t drop_seed = mix_seed(seed, "dropout", 107);
    return finite_difference_check<double>(
        [model, cloud, labels, drop_seed](Tape& t, const TensorPtr& in) {
          model->head.back().b = in;
          ForwardOptions opts;
          opts.training = true;
          opts.dropout_seed = drop_seed;
          auto res = forward(*model, cloud, t, opts);
          return ops::softmax_cross_entropy(t, res.logits, labels);
        },
        bias, 1e-5);
  });

  add("segmenter/seg_head_weights", [seed] {
    ModelConfig cfg = tiny_classifier_config(kSynthParts);
    cfg.head_widths.clear();
    cfg.seg_up_widths = {8, 8};
    auto model = std::make_shared<Model>(build_segmenter(cfg, seed + 109));
    const PointCloud cloud = synth_dataset(1, 32, seed + 110, true)[0];
    const std::vector<std::int64_t> labels(cloud.labels.data(), cloud.labels.data() + cloud.labels.size());
    auto w = model->seg_head.w;
    const std::uint64_t drop_seed = mix_seed(seed, "dropout", 109);
    return finite_difference_check<double>(
        [model, cloud, labels, drop_seed](Tape& t, const TensorPtr& in) {
          model->seg_head.w = in;
          ForwardOptions opts;
          opts.training = true;
          opts.dropout_seed = drop_seed;
          auto res = forward(*model, cloud, t, opts);
          return ops::softmax_cross_entropy(t, res.logits, labels);
        },
        w, 1e-5);
  });

  return cases;
}

}  // namespace spn
