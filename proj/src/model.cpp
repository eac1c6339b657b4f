#include "shufflepoint/model.hpp"

#include <cmath>
#include <numeric>

#include "shufflepoint/rng.hpp"

namespace spn {

void ModelConfig::validate() const {
  if (stages.empty()) throw ConfigError("model config: at least one stage is required");
  if (n_classes < 2) throw ConfigError("model config: n_classes must be at least 2, got " + std::to_string(n_classes));
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("model config: dropout rate must be in [0,1), got " + std::to_string(dropout_rate));
  if (in_channels < 3) throw ConfigError("model config: in_channels must be at least 3 (xyz)");
  if (neighbor == NeighborMethod::radius && !(radius > 0.0))
    throw ConfigError("model config: radius search requires a positive radius");
  Index incoming = -1;  // unknown until a cloud arrives; later stages check against n_out chain
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const std::string tag = "stage" + std::to_string(s);
    if (st.n_out < 1) throw ConfigError(tag + ": n_out must be positive");
    if (st.k < 1) throw ConfigError(tag + ": k must be positive");
    if (st.sgc.mlp_widths.empty()) throw ConfigError(tag + ": SGC width list is empty");
    for (Index w : st.sgc.mlp_widths)
      if (w < 1) throw ConfigError(tag + ": SGC widths must be positive");
    if (incoming >= 0) {
      if (st.n_out > incoming)
        throw ConfigError(tag + ": n_out " + std::to_string(st.n_out) + " exceeds incoming point count " +
                          std::to_string(incoming));
      if (st.k >= incoming)
        throw ConfigError(tag + ": k " + std::to_string(st.k) + " must be below incoming point count " +
                          std::to_string(incoming));
    }
    incoming = st.n_out;
  }
  for (Index w : head_widths)
    if (w < 1) throw ConfigError("model config: head widths must be positive");
  for (Index w : seg_up_widths)
    if (w < 1) throw ConfigError("model config: decoder widths must be positive");
}

ModelConfig default_classifier_config(Index n_classes, Index in_channels) {
  ModelConfig cfg;
  cfg.n_classes = n_classes;
  cfg.in_channels = in_channels;
  cfg.dropout_rate = 0.5;
  StageConfig s1;
  s1.n_out = 128;
  s1.k = 16;
  s1.sgc = {2, {32, 32, 64}, EdgeFeatureVariant::CenterRelative, 16};
  StageConfig s2;
  s2.n_out = 32;
  s2.k = 8;
  s2.sgc = {2, {64, 128}, EdgeFeatureVariant::CenterRelative, 8};
  cfg.stages = {s1, s2};
  cfg.head_widths = {128, 64};
  return cfg;
}

ModelConfig default_segmenter_config(Index n_classes, Index in_channels) {
  ModelConfig cfg = default_classifier_config(n_classes, in_channels);
  cfg.head_widths.clear();
  cfg.seg_up_widths = {64, 32};
  return cfg;
}

ModelConfig tiny_classifier_config(Index n_classes, Index in_channels) {
  ModelConfig cfg;
  cfg.n_classes = n_classes;
  cfg.in_channels = in_channels;
  cfg.dropout_rate = 0.5;
  StageConfig s1;
  s1.n_out = 16;
  s1.k = 6;
  s1.sgc = {2, {8, 8}, EdgeFeatureVariant::CenterRelative, 6};
  StageConfig s2;
  s2.n_out = 8;
  s2.k = 4;
  s2.sgc = {2, {8, 16}, EdgeFeatureVariant::CenterRelative, 4};
  cfg.stages = {s1, s2};
  cfg.head_widths = {16, 8};
  return cfg;
}

namespace {

FcLayer init_fc(std::string name, Index c_in, Index c_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(c_in + c_out));
  FcLayer fc;
  fc.name = std::move(name);
  fc.w = Tensor::uniform({c_in, c_out}, -bound, bound, rng, true);
  fc.b = Tensor::zeros({c_out}, true);
  return fc;
}

// Encoder stacks are identical for both model kinds.
std::vector<Stage> init_stages(const ModelConfig& cfg, std::mt19937_64& rng, Index* out_channels) {
  std::vector<Stage> stages;
  Index c = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& sc = cfg.stages[s];
    const Index c0 = edge_feature_channels(sc.sgc.edge_variant, c);
    Stage stage;
    stage.cfg = sc;
    stage.sgc = SgcUnit::init("stage" + std::to_string(s), sc.sgc, c0, true, rng);
    c = stage.sgc.out_channels();
    stages.push_back(std::move(stage));
  }
  *out_channels = c;
  return stages;
}

}  // namespace

Model build_classifier(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = make_rng(seed, "init");
  Model m;
  m.kind = ModelKind::classifier;
  m.cfg = cfg;
  Index c = 0;
  m.stages = init_stages(cfg, rng, &c);
  for (std::size_t h = 0; h < cfg.head_widths.size(); ++h) {
    m.head.push_back(init_fc("head" + std::to_string(h), c, cfg.head_widths[h], rng));
    c = cfg.head_widths[h];
  }
  m.head.push_back(init_fc("head" + std::to_string(cfg.head_widths.size()), c, cfg.n_classes, rng));
  return m;
}

Model build_segmenter(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.seg_up_widths.size() != cfg.stages.size())
    throw ConfigError("model config: need one decoder width per stage, got " +
                      std::to_string(cfg.seg_up_widths.size()) + " for " + std::to_string(cfg.stages.size()) +
                      " stages");
  auto rng = make_rng(seed, "init");
  Model m;
  m.kind = ModelKind::segmenter;
  m.cfg = cfg;
  Index c = 0;
  m.stages = init_stages(cfg, rng, &c);
  // Decoder runs deepest-first; target of step d is stage S-1-d's point set
  // (the original cloud for the last step), skip-concatenated with that
  // resolution's encoder features.
  const std::size_t n_stages = cfg.stages.size();
  Index carried = c;
  for (std::size_t d = 0; d < n_stages; ++d) {
    const std::size_t target = n_stages - 1 - d;
    const Index skip_c = target == 0 ? cfg.in_channels : m.stages[target - 1].sgc.out_channels();
    const Index width = cfg.seg_up_widths[d];
    m.up_layers.push_back(
        GroupConvLayer::init("up" + std::to_string(d), 1, carried + skip_c, width, true, true, rng));
    carried = width;
  }
  m.seg_head = init_fc("seg_head", carried, cfg.n_classes, rng);
  return m;
}

std::vector<NamedTensor> Model::parameters() {
  std::vector<NamedTensor> out;
  auto add_layer = [&out](GroupConvLayer& layer) {
    for (Index j = 0; j < layer.g; ++j) {
      out.push_back({layer.name + ".w" + std::to_string(j), layer.weights[static_cast<std::size_t>(j)]});
      out.push_back({layer.name + ".b" + std::to_string(j), layer.biases[static_cast<std::size_t>(j)]});
    }
    if (layer.with_bn) {
      out.push_back({layer.name + ".bn.gamma", layer.gamma});
      out.push_back({layer.name + ".bn.beta", layer.beta});
    }
  };
  for (auto& stage : stages)
    for (auto& layer : stage.sgc.layers) add_layer(layer);
  for (auto& fc : head) {
    out.push_back({fc.name + ".w", fc.w});
    out.push_back({fc.name + ".b", fc.b});
  }
  for (auto& layer : up_layers) add_layer(layer);
  if (seg_head.w) {
    out.push_back({seg_head.name + ".w", seg_head.w});
    out.push_back({seg_head.name + ".b", seg_head.b});
  }
  return out;
}

std::vector<NamedStats> Model::bn_buffers() {
  std::vector<NamedStats> out;
  for (auto& stage : stages)
    for (auto& layer : stage.sgc.layers)
      if (layer.with_bn) out.push_back({layer.name + ".bn", &layer.bn_stats});
  for (auto& layer : up_layers)
    if (layer.with_bn) out.push_back({layer.name + ".bn", &layer.bn_stats});
  return out;
}

Index Model::parameter_count() {
  Index n = 0;
  for (auto& p : parameters()) n += p.tensor->size();
  return n;
}

void Model::set_bn_momentum(double momentum) {
  for (auto& stage : stages)
    for (auto& layer : stage.sgc.layers) layer.bn_momentum = momentum;
  for (auto& layer : up_layers) layer.bn_momentum = momentum;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

namespace {

TensorPtr run_head(Tape& tape, TensorPtr x, std::vector<FcLayer>& head, double dropout_rate,
                   const ForwardOptions& opts, std::mt19937_64& dropout_rng) {
  for (std::size_t h = 0; h < head.size(); ++h) {
    x = ops::conv1x1(tape, x, head[h].w, head[h].b);
    if (h + 1 < head.size()) {
      x = ops::relu(tape, x);
      x = ops::dropout(tape, x, dropout_rate, dropout_rng, opts.training);
    }
  }
  return x;
}

}  // namespace

ForwardResult forward(Model& model, const PointCloud& cloud, Tape& tape, const ForwardOptions& opts) {
  cloud.validate();
  if (cloud.n_channels() != model.cfg.in_channels)
    throw DimensionError("forward: cloud has " + std::to_string(cloud.n_channels()) +
                         " channels, model expects " + std::to_string(model.cfg.in_channels));
  auto dropout_rng = make_rng(opts.dropout_seed, "dropout");

  ForwardResult result;
  RowMatrixXd points = cloud.xyz();
  TensorPtr feats = Tensor::from_array({cloud.n_points(), cloud.n_channels()},
                                       Eigen::Map<const ArrayX<double>>(cloud.data.data(), cloud.data.size()));
  TensorPtr input_feats = feats;

  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    Stage& stage = model.stages[s];
    const Index n_in = points.rows();
    const std::string tag = "stage" + std::to_string(s);
    if (stage.cfg.n_out > n_in)
      throw ConfigError(tag + ": n_out " + std::to_string(stage.cfg.n_out) +
                        " exceeds incoming point count " + std::to_string(n_in));
    if (stage.cfg.k >= n_in)
      throw ConfigError(tag + ": k " + std::to_string(stage.cfg.k) +
                        " must be below incoming point count " + std::to_string(n_in));

    std::vector<int> kept = farthest_point_sample(points, stage.cfg.n_out);
    RowMatrixXd center_pts(stage.cfg.n_out, 3);
    for (Index i = 0; i < stage.cfg.n_out; ++i)
      center_pts.row(i) = points.row(kept[static_cast<std::size_t>(i)]);

    RowArrayXXi nbrs;
    if (model.cfg.neighbor == NeighborMethod::knn) {
      nbrs = knn_rows(points, center_pts, stage.cfg.k, kept);
    } else {
      nbrs = radius_rows(points, center_pts, model.cfg.radius, stage.cfg.k, kept);
    }

    auto edge = ops::build_edge_features(tape, feats, kept, nbrs, stage.cfg.sgc.edge_variant);
    feats = ops::sgc_unit_forward(tape, edge, stage.sgc, opts.training);
    points = std::move(center_pts);
    result.stages.push_back({std::move(kept), points, feats});
  }

  if (model.kind == ModelKind::classifier) {
    // Global max over the surviving points is the symmetric aggregator.
    auto pooled = ops::maxpool_neighbors(
        tape, ops::reshape(tape, feats, {1, feats->dim(0), feats->dim(1)}));
    result.logits = run_head(tape, pooled.values, model.head, model.cfg.dropout_rate, opts, dropout_rng);
    return result;
  }

  // Decoder: interpolate deepest features back up the stage chain, skipping
  // in the encoder features of each resolution.
  TensorPtr carried = feats;
  for (std::size_t d = 0; d < model.up_layers.size(); ++d) {
    const std::size_t target = model.stages.size() - 1 - d;
    const RowMatrixXd& coarse_pts = result.stages[target].points;
    const RowMatrixXd& fine_pts = target == 0 ? static_cast<const RowMatrixXd&>(cloud.data)
                                              : result.stages[target - 1].points;
    const RowMatrixXd fine_xyz = fine_pts.leftCols(3);
    const InterpWeights iw = interpolation_weights(coarse_pts, fine_xyz);
    auto up = ops::apply_interpolation(tape, carried, iw);
    TensorPtr skip = target == 0 ? input_feats : result.stages[target - 1].features;
    auto cat = ops::concat_channels(tape, up, skip);
    carried = ops::group_conv_forward(tape, cat, model.up_layers[d], opts.training);
  }
  carried = ops::dropout(tape, carried, model.cfg.dropout_rate, dropout_rng, opts.training);
  result.logits = ops::conv1x1(tape, carried, model.seg_head.w, model.seg_head.b);
  return result;
}

BatchForwardResult forward_batch(Model& model, std::span<const PointCloud* const> clouds, Tape& tape,
                                 const ForwardOptions& opts) {
  if (clouds.empty()) throw UsageError("forward_batch: empty batch");
  const std::size_t nb = clouds.size();
  auto dropout_rng = make_rng(opts.dropout_seed, "dropout");

  // Stack every cloud's feature rows into one tensor; geometry stays per
  // cloud, with row offsets translating local point ids into stacked rows.
  Index total = 0;
  for (const PointCloud* cloud : clouds) {
    cloud->validate();
    if (cloud->n_channels() != model.cfg.in_channels)
      throw DimensionError("forward: cloud has " + std::to_string(cloud->n_channels()) +
                           " channels, model expects " + std::to_string(model.cfg.in_channels));
    total += cloud->n_points();
  }
  auto stacked = Tensor::uninit({total, model.cfg.in_channels});
  std::vector<Index> off(nb);
  std::vector<RowMatrixXd> points(nb);
  {
    Index at = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      off[b] = at;
      stacked->matrix().middleRows(at, clouds[b]->n_points()) = clouds[b]->data;
      points[b] = clouds[b]->xyz();
      at += clouds[b]->n_points();
    }
  }
  TensorPtr feats = stacked;
  TensorPtr input_feats = feats;
  std::vector<std::vector<RowMatrixXd>> stage_points;  // per stage, per cloud
  std::vector<TensorPtr> stage_feats;

  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    Stage& stage = model.stages[s];
    const std::string tag = "stage" + std::to_string(s);
    const Index n_out = stage.cfg.n_out, k = stage.cfg.k;
    std::vector<int> centers_all(nb * static_cast<std::size_t>(n_out));
    RowArrayXXi nbrs_all(static_cast<Index>(nb) * n_out, k);
    std::vector<RowMatrixXd> next_points(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const Index n_in = points[b].rows();
      if (n_out > n_in)
        throw ConfigError(tag + ": n_out " + std::to_string(n_out) + " exceeds incoming point count " +
                          std::to_string(n_in));
      if (k >= n_in)
        throw ConfigError(tag + ": k " + std::to_string(k) + " must be below incoming point count " +
                          std::to_string(n_in));
      std::vector<int> kept = farthest_point_sample(points[b], n_out);
      RowMatrixXd center_pts(n_out, 3);
      for (Index i = 0; i < n_out; ++i)
        center_pts.row(i) = points[b].row(kept[static_cast<std::size_t>(i)]);
      RowArrayXXi nbrs;
      if (model.cfg.neighbor == NeighborMethod::knn) {
        nbrs = knn_rows(points[b], center_pts, k, kept);
      } else {
        nbrs = radius_rows(points[b], center_pts, model.cfg.radius, k, kept);
      }
      const int base = static_cast<int>(off[b]);
      const Index row0 = static_cast<Index>(b) * n_out;
      for (Index i = 0; i < n_out; ++i) {
        centers_all[static_cast<std::size_t>(row0 + i)] = base + kept[static_cast<std::size_t>(i)];
        for (Index j = 0; j < k; ++j) nbrs_all(row0 + i, j) = base + nbrs(i, j);
      }
      next_points[b] = std::move(center_pts);
    }
    auto edge = ops::build_edge_features(tape, feats, centers_all, nbrs_all, stage.cfg.sgc.edge_variant);
    feats = ops::sgc_unit_forward(tape, edge, stage.sgc, opts.training);
    points = std::move(next_points);
    for (std::size_t b = 0; b < nb; ++b) off[b] = static_cast<Index>(b) * n_out;
    stage_points.push_back(points);
    stage_feats.push_back(feats);
  }

  BatchForwardResult result;
  if (model.kind == ModelKind::classifier) {
    const Index n_last = model.stages.back().cfg.n_out;
    auto grouped = ops::reshape(tape, feats, {static_cast<Index>(nb), n_last, feats->channels()});
    auto pooled = ops::maxpool_neighbors(tape, grouped);
    result.logits = run_head(tape, pooled.values, model.head, model.cfg.dropout_rate, opts, dropout_rng);
    result.row_offset.resize(nb);
    std::iota(result.row_offset.begin(), result.row_offset.end(), Index{0});
    return result;
  }

  TensorPtr carried = feats;
  std::vector<Index> fine_off(nb);
  for (std::size_t d = 0; d < model.up_layers.size(); ++d) {
    const std::size_t target = model.stages.size() - 1 - d;
    const Index n_coarse = model.stages[target].cfg.n_out;
    Index fine_total = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      fine_off[b] = fine_total;
      fine_total += target == 0 ? clouds[b]->n_points() : model.stages[target - 1].cfg.n_out;
    }
    InterpWeights all;
    for (std::size_t b = 0; b < nb; ++b) {
      const RowMatrixXd fine_xyz =
          target == 0 ? clouds[b]->xyz() : stage_points[target - 1][b];
      InterpWeights iw = interpolation_weights(stage_points[target][b], fine_xyz);
      if (b == 0) {
        all.idx.resize(fine_total, iw.idx.cols());
        all.w.resize(fine_total, iw.w.cols());
      }
      all.idx.middleRows(fine_off[b], iw.idx.rows()) = iw.idx + static_cast<int>(static_cast<Index>(b) * n_coarse);
      all.w.middleRows(fine_off[b], iw.w.rows()) = iw.w;
    }
    auto up = ops::apply_interpolation(tape, carried, all);
    TensorPtr skip = target == 0 ? input_feats : stage_feats[target - 1];
    auto cat = ops::concat_channels(tape, up, skip);
    carried = ops::group_conv_forward(tape, cat, model.up_layers[d], opts.training);
  }
  carried = ops::dropout(tape, carried, model.cfg.dropout_rate, dropout_rng, opts.training);
  result.logits = ops::conv1x1(tape, carried, model.seg_head.w, model.seg_head.b);
  result.row_offset = fine_off;
  return result;
}

}  // namespace spn
