#pragma once

#include <span>
#include <string>
#include <vector>

#include "shufflepoint/pointcloud.hpp"
#include "shufflepoint/sgc.hpp"

namespace spn {

// One downsampling stage: FPS keeps n_out centers, neighbors are searched in
// the incoming point set, edge features feed the SGC unit.
struct StageConfig {
  Index n_out = 0;
  Index k = 16;
  SgcUnitConfig sgc;
};

struct ModelConfig {
  std::vector<StageConfig> stages;
  std::vector<Index> head_widths;    // classification head
  std::vector<Index> seg_up_widths;  // one width per decoder upsampling stage
  Index n_classes = 0;
  double dropout_rate = 0.5;
  Index in_channels = 3;
  NeighborMethod neighbor = NeighborMethod::knn;
  double radius = 0.2;

  void validate() const;
};

// Small 2-stage setup sized for CPU work; exercises grouping, shuffling,
// downsampling, and the full head.
ModelConfig default_classifier_config(Index n_classes = 4, Index in_channels = 3);
ModelConfig default_segmenter_config(Index n_classes, Index in_channels = 3);
// Much smaller variant for exhaustive gradient checks on ~32-point clouds.
ModelConfig tiny_classifier_config(Index n_classes = 3, Index in_channels = 3);

enum class ModelKind { classifier, segmenter };

struct FcLayer {
  std::string name;
  TensorPtr w, b;
};

struct Stage {
  StageConfig cfg;
  SgcUnit sgc;
};

struct NamedTensor {
  std::string name;
  TensorPtr tensor;
};

struct NamedStats {
  std::string name;
  BatchNormStats* stats;
};

struct Model {
  ModelKind kind = ModelKind::classifier;
  ModelConfig cfg;
  std::vector<Stage> stages;
  std::vector<FcLayer> head;             // classifier: hidden layers + logits layer
  std::vector<GroupConvLayer> up_layers; // segmenter decoder (g=1, bn+relu)
  FcLayer seg_head;                      // segmenter per-point logits

  // Fixed enumeration order; checkpoint layout and optimizer slots rely on it.
  std::vector<NamedTensor> parameters();
  std::vector<NamedStats> bn_buffers();
  Index parameter_count();
  void set_bn_momentum(double momentum);
  void zero_grad();
};

Model build_classifier(const ModelConfig& cfg, std::uint64_t seed);
Model build_segmenter(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;  // consumed only in training mode
};

struct StageTrace {
  std::vector<int> kept;  // indices into the previous stage's point set
  RowMatrixXd points;     // n_out x 3
  TensorPtr features;     // n_out x C_out
};

struct ForwardResult {
  TensorPtr logits;  // classifier: 1 x n_classes; segmenter: N x n_classes
  std::vector<StageTrace> stages;
};

ForwardResult forward(Model& model, const PointCloud& cloud, Tape& tape,
                      const ForwardOptions& opts = {});

// Joint forward over a mini-batch: clouds are stacked along the row axis so
// batch-norm statistics cover the whole batch (matching eval-time running
// stats), while FPS/neighbor search stay per cloud via index offsets.
// Classifier logits hold one row per cloud; segmenter logits hold the clouds'
// per-point rows concatenated in batch order, with row_offset marking where
// each cloud's rows begin.
struct BatchForwardResult {
  TensorPtr logits;
  std::vector<Index> row_offset;
};

BatchForwardResult forward_batch(Model& model, std::span<const PointCloud* const> clouds, Tape& tape,
                                 const ForwardOptions& opts = {});

}  // namespace spn
