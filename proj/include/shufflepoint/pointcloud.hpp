#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "shufflepoint/tensor.hpp"

namespace spn {

enum class LabelMode : std::uint8_t { none = 0, per_cloud = 1, per_point = 2 };

// N x F point set; channels 0-2 are XYZ positions, further channels are
// free-form features. Labels are optional: one per cloud or one per point.
struct PointCloud {
  RowMatrixXd data;  // N x F
  LabelMode label_mode = LabelMode::none;
  VectorXi64 labels;  // length 1 (per_cloud) or N (per_point)

  Index n_points() const { return data.rows(); }
  Index n_channels() const { return data.cols(); }
  Eigen::Block<const RowMatrixXd> xyz() const { return data.topLeftCorner(data.rows(), 3); }

  void validate() const;
};

enum class NeighborMethod { knn, radius };

// Rectangular neighbor table: row i lists the neighbors of center i, nearest
// first. knn rows hold k distinct indices; radius rows are padded by
// repetition when fewer than k points fall inside the radius.
struct NeighborIndex {
  RowArrayXXi indices;  // N x K
  Index k = 0;
  NeighborMethod method = NeighborMethod::knn;
};

enum class EdgeFeatureVariant { CenterRelative, CenterNeighbor, CenterNeighborRelative };

Index edge_feature_channels(EdgeFeatureVariant v, Index f);

// Shared squared-distance kernel on the XYZ channels. Every tie-sensitive
// consumer (k-NN, radius, FPS, interpolation) goes through this one
// expression so their orderings can never disagree.
inline double dist2_xyz(const RowMatrixXd& pts, Index a, Index b) {
  const double dx = pts(a, 0) - pts(b, 0);
  const double dy = pts(a, 1) - pts(b, 1);
  const double dz = pts(a, 2) - pts(b, 2);
  return dx * dx + dy * dy + dz * dz;
}

NeighborIndex knn_search(const PointCloud& cloud, Index k);
NeighborIndex radius_search(const PointCloud& cloud, double r, Index k);

// k nearest points in `cloud` to each row of `queries` (N x 3), self excluded
// only when `exclude` maps query row -> cloud row of the same point.
RowArrayXXi knn_rows(const RowMatrixXd& points, const RowMatrixXd& queries, Index k,
                     std::span<const int> exclude = {});

// Radius variant of knn_rows: up to k in-radius points nearest-first, sparse
// rows padded by repeating the nearest hit (or nearest point overall).
RowArrayXXi radius_rows(const RowMatrixXd& points, const RowMatrixXd& queries, double r, Index k,
                        std::span<const int> exclude = {});

// Exact 3-d k-d tree; must agree with the brute-force search row for row,
// including the (distance, index) tie order.
class KdTree3 {
 public:
  explicit KdTree3(const RowMatrixXd& points);
  // Row of the k nearest points to `q`, nearest first; `exclude` skips one
  // point index (the query itself), -1 to keep all.
  std::vector<int> query(const Eigen::RowVector3d& q, Index k, int exclude = -1) const;

 private:
  struct Node {
    int point = -1;
    int axis = 0;
    int left = -1;
    int right = -1;
  };
  int build(std::vector<int>& idx, int lo, int hi, int depth);
  RowMatrixXd pts_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

NeighborIndex knn_search_kdtree(const PointCloud& cloud, Index k);

// Greedy max-min farthest point sampling. Starts at the lowest-index point
// farthest from the centroid; each later pick maximizes the min distance to
// the selected set, ties to the lowest index. The centroid is accumulated in
// per-axis sorted order so the result is exactly invariant to point order.
std::vector<int> farthest_point_sample(const RowMatrixXd& points, Index m);
std::vector<int> farthest_point_sample(const PointCloud& cloud, Index m);

// Translate to zero centroid, scale by 1/max-norm (same sorted-order centroid
// as farthest_point_sample). Extra channels pass through untouched.
PointCloud normalize_unit_sphere(const PointCloud& cloud);

struct AugmentParams {
  bool rotate = true;
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
};

// Random rotation about the z (up) axis, isotropic scale in [lo,hi], then
// clipped Gaussian jitter per coordinate; XYZ only, deterministic per seed.
PointCloud augment(const PointCloud& cloud, std::uint64_t seed, const AugmentParams& params);

// Inverse-squared-distance weights over (up to) 3 nearest coarse points per
// fine point; a coincident coarse point takes the full weight.
struct InterpWeights {
  RowArrayXXi idx;  // N x P, P = min(3, M)
  RowMatrixXd w;    // N x P, rows sum to 1
};

InterpWeights interpolation_weights(const RowMatrixXd& coarse_pts, const RowMatrixXd& fine_pts);

RowMatrixXd interpolate_features(const RowMatrixXd& coarse_pts, const RowMatrixXd& coarse_feats,
                                 const RowMatrixXd& fine_pts);

namespace ops {

// Tape form of feature interpolation: fixed geometry weights, gradient flows
// to the coarse features.
TensorPtr apply_interpolation(Tape& tape, const TensorPtr& coarse_feats, const InterpWeights& w);

// Edge features for M centers with neighbor rows indexing the full N-point
// feature set. CenterRelative: (x_i, x_i - x_ij); CenterNeighbor: (x_i, x_ij);
// CenterNeighborRelative: (x_i, x_ij, x_i - x_ij). Gradients reach both ends
// of each edge.
TensorPtr build_edge_features(Tape& tape, const TensorPtr& feats, std::span<const int> centers,
                              const RowArrayXXi& neighbors, EdgeFeatureVariant variant);

// All points are centers (neighbor table rows == N).
TensorPtr build_edge_features(Tape& tape, const TensorPtr& feats, const NeighborIndex& neighbors,
                              EdgeFeatureVariant variant);

}  // namespace ops

}  // namespace spn
