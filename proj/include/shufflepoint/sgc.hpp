#pragma once

#include <string>
#include <vector>

#include "shufflepoint/pointcloud.hpp"
#include "shufflepoint/tensor.hpp"

namespace spn {

// One grouped 1x1 convolution layer: channels are partitioned into g
// contiguous blocks, each convolved independently, so the weight count is
// c_in*c_out/g instead of c_in*c_out. g=1 degenerates to a plain conv1x1.
struct GroupConvLayer {
  std::string name;
  Index g = 1;
  Index c_in = 0;
  Index c_out = 0;
  std::vector<TensorPtr> weights;  // g blocks of (c_in/g) x (c_out/g)
  std::vector<TensorPtr> biases;   // g blocks of (c_out/g)
  bool with_bn = true;
  bool with_activation = true;
  TensorPtr gamma, beta;  // present iff with_bn
  BatchNormStats bn_stats;
  double bn_momentum = 0.9;

  static GroupConvLayer init(std::string name, Index g, Index c_in, Index c_out, bool with_bn,
                             bool with_activation, std::mt19937_64& rng);

  // Weight scalars across the g blocks; equals c_in*c_out/g by construction.
  Index weight_param_count() const;
};

// Permutation taking channel layout g x n (n = c/g) to its transpose n x g:
// output j reads input (j mod g)*n + (j div g).
std::vector<Index> shuffle_permutation(Index c, Index g);

namespace ops {

// Contiguous channel blocks [j*C/g, (j+1)*C/g).
std::vector<TensorPtr> split_groups(Tape& tape, const TensorPtr& x, Index g);

// Pure channel permutation mixing the g groups; shuffle(g) then shuffle(C/g)
// is the identity.
TensorPtr channel_shuffle(Tape& tape, const TensorPtr& x, Index g);

// Per-group conv1x1 on the matching channel slice, concatenated in group
// order, then optional batch-norm and activation.
TensorPtr group_conv_forward(Tape& tape, const TensorPtr& x, GroupConvLayer& layer, bool training);

}  // namespace ops

// Grouped-MLP widths applied to edge features, shuffling channels between
// layers, finished with a max-pool over the neighbor axis.
struct SgcUnitConfig {
  Index g = 1;
  std::vector<Index> mlp_widths;
  EdgeFeatureVariant edge_variant = EdgeFeatureVariant::CenterRelative;
  Index k = 16;
};

struct SgcUnit {
  SgcUnitConfig cfg;
  std::vector<GroupConvLayer> layers;

  static SgcUnit init(const std::string& name, const SgcUnitConfig& cfg, Index c0, bool with_bn,
                      std::mt19937_64& rng);
  Index out_channels() const { return layers.empty() ? 0 : layers.back().c_out; }
};

namespace ops {

// edge_feats is N x K x C0; grouped layers alternate with channel shuffles
// (none after the last layer, whose group outputs are simply concatenated),
// then max over K -> N x C_last.
TensorPtr sgc_unit_forward(Tape& tape, const TensorPtr& edge_feats, SgcUnit& unit, bool training);

}  // namespace ops

}  // namespace spn
