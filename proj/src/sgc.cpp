#include "shufflepoint/sgc.hpp"

#include <cmath>

namespace spn {

namespace {

void check_divisible(const std::string& name, Index g, Index c_in, Index c_out) {
  if (g < 1) throw ConfigError(name + ": group count must be positive, got " + std::to_string(g));
  if (c_in % g != 0)
    throw ConfigError(name + ": group count " + std::to_string(g) + " does not divide input channels " +
                      std::to_string(c_in));
  if (c_out % g != 0)
    throw ConfigError(name + ": group count " + std::to_string(g) + " does not divide output channels " +
                      std::to_string(c_out));
}

}  // namespace

GroupConvLayer GroupConvLayer::init(std::string name, Index g, Index c_in, Index c_out, bool with_bn,
                                    bool with_activation, std::mt19937_64& rng) {
  check_divisible(name, g, c_in, c_out);
  GroupConvLayer layer;
  layer.name = std::move(name);
  layer.g = g;
  layer.c_in = c_in;
  layer.c_out = c_out;
  layer.with_bn = with_bn;
  layer.with_activation = with_activation;
  const double bound = std::sqrt(6.0 / static_cast<double>(c_in + c_out));
  for (Index j = 0; j < g; ++j) {
    layer.weights.push_back(Tensor::uniform({c_in / g, c_out / g}, -bound, bound, rng, true));
    layer.biases.push_back(Tensor::zeros({c_out / g}, true));
  }
  if (with_bn) {
    auto gamma = Tensor::zeros({c_out}, true);
    gamma->values.setOnes();
    layer.gamma = gamma;
    layer.beta = Tensor::zeros({c_out}, true);
    layer.bn_stats = BatchNormStats::init(c_out);
  }
  return layer;
}

Index GroupConvLayer::weight_param_count() const {
  Index n = 0;
  for (const auto& w : weights) n += w->size();
  return n;
}

std::vector<Index> shuffle_permutation(Index c, Index g) {
  if (g < 1 || c % g != 0)
    throw ConfigError("channel_shuffle: group count " + std::to_string(g) + " does not divide " +
                      std::to_string(c) + " channels");
  const Index n = c / g;
  std::vector<Index> perm(static_cast<std::size_t>(c));
  for (Index j = 0; j < c; ++j) perm[static_cast<std::size_t>(j)] = (j % g) * n + (j / g);
  return perm;
}

namespace ops {

std::vector<TensorPtr> split_groups(Tape& tape, const TensorPtr& x, Index g) {
  const Index c = x->channels();
  if (g < 1 || c % g != 0)
    throw ConfigError("split_groups: group count " + std::to_string(g) + " does not divide " +
                      std::to_string(c) + " channels");
  const Index n = c / g;
  std::vector<TensorPtr> parts;
  parts.reserve(static_cast<std::size_t>(g));
  for (Index j = 0; j < g; ++j) parts.push_back(slice_channels(tape, x, j * n, (j + 1) * n));
  return parts;
}

TensorPtr channel_shuffle(Tape& tape, const TensorPtr& x, Index g) {
  return permute_channels(tape, x, shuffle_permutation(x->channels(), g));
}

TensorPtr group_conv_forward(Tape& tape, const TensorPtr& x, GroupConvLayer& layer, bool training) {
  if (x->channels() != layer.c_in)
    throw DimensionError(layer.name + ": input has " + std::to_string(x->channels()) +
                         " channels, layer expects " + std::to_string(layer.c_in));
  TensorPtr y;
  if (layer.g == 1) {
    y = conv1x1(tape, x, layer.weights[0], layer.biases[0]);
  } else {
    auto parts = split_groups(tape, x, layer.g);
    std::vector<TensorPtr> outs;
    outs.reserve(parts.size());
    for (Index j = 0; j < layer.g; ++j)
      outs.push_back(conv1x1(tape, parts[static_cast<std::size_t>(j)],
                             layer.weights[static_cast<std::size_t>(j)],
                             layer.biases[static_cast<std::size_t>(j)]));
    y = concat_channels(tape, outs);
  }
  if (layer.with_bn)
    y = batchnorm(tape, y, layer.gamma, layer.beta, layer.bn_stats, layer.bn_momentum, training);
  if (layer.with_activation) y = relu(tape, y);
  return y;
}

}  // namespace ops

SgcUnit SgcUnit::init(const std::string& name, const SgcUnitConfig& cfg, Index c0, bool with_bn,
                      std::mt19937_64& rng) {
  if (cfg.mlp_widths.empty()) throw ConfigError(name + ": mlp width list is empty");
  SgcUnit unit;
  unit.cfg = cfg;
  Index c_in = c0;
  for (std::size_t l = 0; l < cfg.mlp_widths.size(); ++l) {
    const std::string layer_name = name + ".layer" + std::to_string(l);
    unit.layers.push_back(
        GroupConvLayer::init(layer_name, cfg.g, c_in, cfg.mlp_widths[l], with_bn, true, rng));
    c_in = cfg.mlp_widths[l];
  }
  return unit;
}

namespace ops {

TensorPtr sgc_unit_forward(Tape& tape, const TensorPtr& edge_feats, SgcUnit& unit, bool training) {
  if (edge_feats->rank() != 3)
    throw DimensionError("sgc_unit_forward expects N x K x C edge features, got " +
                         shape_str(edge_feats->shape));
  TensorPtr x = edge_feats;
  for (std::size_t l = 0; l < unit.layers.size(); ++l) {
    x = group_conv_forward(tape, x, unit.layers[l], training);
    if (l + 1 < unit.layers.size()) x = channel_shuffle(tape, x, unit.layers[l].g);
  }
  return maxpool_neighbors(tape, x).values;
}

}  // namespace ops

}  // namespace spn
