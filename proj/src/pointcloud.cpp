#include "shufflepoint/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "shufflepoint/rng.hpp"

namespace spn {

void PointCloud::validate() const {
  if (data.rows() < 1) throw InputError("point cloud is empty");
  if (data.cols() < 3)
    throw InputError("point cloud has " + std::to_string(data.cols()) + " channels, need at least 3 (xyz)");
  if (!data.array().isFinite().all()) throw InputError("point cloud contains non-finite values");
  switch (label_mode) {
    case LabelMode::none:
      break;
    case LabelMode::per_cloud:
      if (labels.size() != 1) throw InputError("per-cloud label mode requires exactly 1 label");
      break;
    case LabelMode::per_point:
      if (labels.size() != data.rows())
        throw InputError("per-point label mode requires one label per point, got " +
                         std::to_string(labels.size()) + " for " + std::to_string(data.rows()));
      break;
  }
}

Index edge_feature_channels(EdgeFeatureVariant v, Index f) {
  switch (v) {
    case EdgeFeatureVariant::CenterRelative:
    case EdgeFeatureVariant::CenterNeighbor:
      return 2 * f;
    case EdgeFeatureVariant::CenterNeighborRelative:
      return 3 * f;
  }
  throw ConfigError("unknown edge feature variant");
}

namespace {

// Total order on candidate neighbors: squared distance first, index second.
struct Cand {
  double d2;
  int idx;
  bool operator<(const Cand& o) const { return d2 < o.d2 || (d2 == o.d2 && idx < o.idx); }
};

// Centroid with per-axis sorted summation: the accumulation order is a pure
// function of the value multiset, so any permutation of the points produces
// bit-identical coordinates.
Eigen::RowVector3d canonical_centroid(const RowMatrixXd& pts) {
  Eigen::RowVector3d c;
  std::vector<double> axis(static_cast<std::size_t>(pts.rows()));
  for (int a = 0; a < 3; ++a) {
    for (Index i = 0; i < pts.rows(); ++i) axis[static_cast<std::size_t>(i)] = pts(i, a);
    std::sort(axis.begin(), axis.end());
    double sum = 0;
    for (double v : axis) sum += v;
    c[a] = sum / static_cast<double>(pts.rows());
  }
  return c;
}

double dist2_to(const RowMatrixXd& pts, Index i, const Eigen::RowVector3d& q) {
  const double dx = pts(i, 0) - q[0];
  const double dy = pts(i, 1) - q[1];
  const double dz = pts(i, 2) - q[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

NeighborIndex knn_search(const PointCloud& cloud, Index k) {
  cloud.validate();
  const Index n = cloud.n_points();
  if (k < 1 || k >= n)
    throw InputError("knn_search: k=" + std::to_string(k) + " outside [1, N-1] for N=" + std::to_string(n));
  NeighborIndex out;
  out.k = k;
  out.method = NeighborMethod::knn;
  out.indices.resize(n, k);
  std::vector<Cand> cands(static_cast<std::size_t>(n - 1));
  for (Index i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      cands[w++] = {dist2_xyz(cloud.data, i, j), static_cast<int>(j)};
    }
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end());
    for (Index kk = 0; kk < k; ++kk) out.indices(i, kk) = cands[static_cast<std::size_t>(kk)].idx;
  }
  return out;
}

NeighborIndex radius_search(const PointCloud& cloud, double r, Index k) {
  cloud.validate();
  if (!(r > 0.0)) throw InputError("radius_search: radius must be positive");
  if (k < 1) throw InputError("radius_search: k must be at least 1");
  const Index n = cloud.n_points();
  const double r2 = r * r;
  NeighborIndex out;
  out.k = k;
  out.method = NeighborMethod::radius;
  out.indices.resize(n, k);
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    cands.clear();
    Cand nearest_overall{std::numeric_limits<double>::infinity(), -1};
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      Cand c{dist2_xyz(cloud.data, i, j), static_cast<int>(j)};
      if (c < nearest_overall) nearest_overall = c;
      if (c.d2 <= r2) cands.push_back(c);
    }
    std::sort(cands.begin(), cands.end());
    const Index found = std::min<Index>(k, static_cast<Index>(cands.size()));
    for (Index kk = 0; kk < found; ++kk) out.indices(i, kk) = cands[static_cast<std::size_t>(kk)].idx;
    // Pad sparse rows by repeating the nearest hit (or the globally nearest
    // point when the radius caught nothing) so the table stays rectangular.
    const int pad = found > 0 ? out.indices(i, 0) : nearest_overall.idx;
    for (Index kk = found; kk < k; ++kk) out.indices(i, kk) = pad;
  }
  return out;
}

RowArrayXXi knn_rows(const RowMatrixXd& points, const RowMatrixXd& queries, Index k,
                     std::span<const int> exclude) {
  const Index n = points.rows(), m = queries.rows();
  if (!exclude.empty() && static_cast<Index>(exclude.size()) != m)
    throw DimensionError("knn_rows: exclude list size does not match query count");
  const Index avail = exclude.empty() ? n : n - 1;
  if (k < 1 || k > avail)
    throw InputError("knn_rows: k=" + std::to_string(k) + " exceeds available points " + std::to_string(avail));
  RowArrayXXi out(m, k);
  std::vector<Cand> cands(static_cast<std::size_t>(n));
  for (Index i = 0; i < m; ++i) {
    const int self = exclude.empty() ? -1 : exclude[static_cast<std::size_t>(i)];
    std::size_t w = 0;
    for (Index j = 0; j < n; ++j) {
      if (static_cast<int>(j) == self) continue;
      const double dx = points(j, 0) - queries(i, 0);
      const double dy = points(j, 1) - queries(i, 1);
      const double dz = points(j, 2) - queries(i, 2);
      cands[w++] = {dx * dx + dy * dy + dz * dz, static_cast<int>(j)};
    }
    std::partial_sort(cands.begin(), cands.begin() + k, cands.begin() + static_cast<std::ptrdiff_t>(w));
    for (Index kk = 0; kk < k; ++kk) out(i, kk) = cands[static_cast<std::size_t>(kk)].idx;
  }
  return out;
}

RowArrayXXi radius_rows(const RowMatrixXd& points, const RowMatrixXd& queries, double r, Index k,
                        std::span<const int> exclude) {
  if (!(r > 0.0)) throw InputError("radius_rows: radius must be positive");
  if (k < 1) throw InputError("radius_rows: k must be at least 1");
  const Index n = points.rows(), m = queries.rows();
  if (!exclude.empty() && static_cast<Index>(exclude.size()) != m)
    throw DimensionError("radius_rows: exclude list size does not match query count");
  const double r2 = r * r;
  RowArrayXXi out(m, k);
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < m; ++i) {
    const int self = exclude.empty() ? -1 : exclude[static_cast<std::size_t>(i)];
    cands.clear();
    Cand nearest_overall{std::numeric_limits<double>::infinity(), -1};
    for (Index j = 0; j < n; ++j) {
      if (static_cast<int>(j) == self) continue;
      const double dx = points(j, 0) - queries(i, 0);
      const double dy = points(j, 1) - queries(i, 1);
      const double dz = points(j, 2) - queries(i, 2);
      Cand c{dx * dx + dy * dy + dz * dz, static_cast<int>(j)};
      if (c < nearest_overall) nearest_overall = c;
      if (c.d2 <= r2) cands.push_back(c);
    }
    if (nearest_overall.idx < 0) throw InputError("radius_rows: no candidate points for query row " + std::to_string(i));
    std::sort(cands.begin(), cands.end());
    const Index found = std::min<Index>(k, static_cast<Index>(cands.size()));
    for (Index kk = 0; kk < found; ++kk) out(i, kk) = cands[static_cast<std::size_t>(kk)].idx;
    const int pad = found > 0 ? out(i, 0) : nearest_overall.idx;
    for (Index kk = found; kk < k; ++kk) out(i, kk) = pad;
  }
  return out;
}

KdTree3::KdTree3(const RowMatrixXd& points) : pts_(points.leftCols(3)) {
  if (pts_.rows() == 0) throw InputError("KdTree3: empty point set");
  std::vector<int> idx(static_cast<std::size_t>(pts_.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(idx.size());
  root_ = build(idx, 0, static_cast<int>(idx.size()), 0);
}

int KdTree3::build(std::vector<int>& idx, int lo, int hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const int mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi, [this, axis](int a, int b) {
    const double va = pts_(a, axis), vb = pts_(b, axis);
    return va < vb || (va == vb && a < b);
  });
  const int node_id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{idx[static_cast<std::size_t>(mid)], axis, -1, -1});
  nodes_[static_cast<std::size_t>(node_id)].left = build(idx, lo, mid, depth + 1);
  nodes_[static_cast<std::size_t>(node_id)].right = build(idx, mid + 1, hi, depth + 1);
  return node_id;
}

std::vector<int> KdTree3::query(const Eigen::RowVector3d& q, Index k, int exclude) const {
  const Index avail = pts_.rows() - (exclude >= 0 ? 1 : 0);
  if (k < 1 || k > avail)
    throw InputError("KdTree3::query: k=" + std::to_string(k) + " exceeds available points " +
                     std::to_string(avail));
  // Max-heap of the best k candidates under the (d2, idx) order.
  std::priority_queue<Cand> heap;
  auto visit = [&](auto&& self, int node_id) -> void {
    if (node_id < 0) return;
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.point != exclude) {
      Cand c{dist2_to(pts_, node.point, q), node.point};
      if (static_cast<Index>(heap.size()) < k) {
        heap.push(c);
      } else if (c < heap.top()) {
        heap.pop();
        heap.push(c);
      }
    }
    const double diff = q[node.axis] - pts_(node.point, node.axis);
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    self(self, near);
    // Descend the far side whenever the splitting plane is not strictly
    // worse than the current worst: <= keeps equal-distance candidates
    // reachable so the (d2, idx) tie order matches brute force exactly.
    if (static_cast<Index>(heap.size()) < k || diff * diff <= heap.top().d2) self(self, far);
  };
  visit(visit, root_);
  std::vector<Cand> best;
  best.reserve(heap.size());
  while (!heap.empty()) {
    best.push_back(heap.top());
    heap.pop();
  }
  std::sort(best.begin(), best.end());
  std::vector<int> out(best.size());
  for (std::size_t i = 0; i < best.size(); ++i) out[i] = best[i].idx;
  return out;
}

NeighborIndex knn_search_kdtree(const PointCloud& cloud, Index k) {
  cloud.validate();
  const Index n = cloud.n_points();
  if (k < 1 || k >= n)
    throw InputError("knn_search_kdtree: k=" + std::to_string(k) + " outside [1, N-1] for N=" + std::to_string(n));
  KdTree3 tree(cloud.data);
  NeighborIndex out;
  out.k = k;
  out.method = NeighborMethod::knn;
  out.indices.resize(n, k);
  for (Index i = 0; i < n; ++i) {
    auto row = tree.query(cloud.data.row(i).head<3>(), k, static_cast<int>(i));
    for (Index kk = 0; kk < k; ++kk) out.indices(i, kk) = row[static_cast<std::size_t>(kk)];
  }
  return out;
}

std::vector<int> farthest_point_sample(const RowMatrixXd& points, Index m) {
  const Index n = points.rows();
  if (n < 1) throw InputError("farthest_point_sample: empty point set");
  if (m < 1 || m > n)
    throw InputError("farthest_point_sample: m=" + std::to_string(m) + " outside [1, N] for N=" + std::to_string(n));
  const Eigen::RowVector3d centroid = canonical_centroid(points.leftCols(3));
  Index seed = 0;
  double best = -1.0;
  for (Index i = 0; i < n; ++i) {
    const double d2 = dist2_to(points, i, centroid);
    if (d2 > best) {
      best = d2;
      seed = i;
    }
  }
  std::vector<int> picked;
  picked.reserve(static_cast<std::size_t>(m));
  picked.push_back(static_cast<int>(seed));
  std::vector<double> min_d2(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) min_d2[static_cast<std::size_t>(i)] = dist2_xyz(points, i, seed);
  while (static_cast<Index>(picked.size()) < m) {
    Index next = 0;
    double far = -1.0;
    for (Index i = 0; i < n; ++i) {
      const double d2 = min_d2[static_cast<std::size_t>(i)];
      if (d2 > far) {
        far = d2;
        next = i;
      }
    }
    picked.push_back(static_cast<int>(next));
    for (Index i = 0; i < n; ++i) {
      const double d2 = dist2_xyz(points, i, next);
      auto& cur = min_d2[static_cast<std::size_t>(i)];
      if (d2 < cur) cur = d2;
    }
  }
  return picked;
}

std::vector<int> farthest_point_sample(const PointCloud& cloud, Index m) {
  cloud.validate();
  return farthest_point_sample(cloud.data, m);
}

PointCloud normalize_unit_sphere(const PointCloud& cloud) {
  cloud.validate();
  PointCloud out = cloud;
  const Eigen::RowVector3d centroid = canonical_centroid(cloud.xyz());
  out.data.leftCols(3).rowwise() -= centroid;
  double max_norm2 = 0;
  for (Index i = 0; i < out.data.rows(); ++i)
    max_norm2 = std::max(max_norm2, out.data.row(i).head<3>().squaredNorm());
  if (max_norm2 > 0) out.data.leftCols(3) /= std::sqrt(max_norm2);
  return out;
}

PointCloud augment(const PointCloud& cloud, std::uint64_t seed, const AugmentParams& params) {
  cloud.validate();
  if (!(params.scale_lo > 0.0) || params.scale_hi < params.scale_lo)
    throw ConfigError("augment: scale range must satisfy 0 < lo <= hi");
  if (params.jitter_sigma < 0.0) throw ConfigError("augment: jitter sigma must be non-negative");
  auto rng = make_rng(seed, "augment");
  PointCloud out = cloud;
  if (params.rotate) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
    const double a = angle(rng);
    const double c = std::cos(a), s = std::sin(a);
    for (Index i = 0; i < out.data.rows(); ++i) {
      const double x = out.data(i, 0), y = out.data(i, 1);
      out.data(i, 0) = c * x - s * y;
      out.data(i, 1) = s * x + c * y;
    }
  }
  std::uniform_real_distribution<double> scale_dist(params.scale_lo, params.scale_hi);
  const double scale = params.scale_lo == params.scale_hi ? params.scale_lo : scale_dist(rng);
  out.data.leftCols(3) *= scale;
  if (params.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.jitter_sigma);
    for (Index i = 0; i < out.data.rows(); ++i)
      for (int a = 0; a < 3; ++a)
        out.data(i, a) += std::clamp(noise(rng), -params.jitter_clip, params.jitter_clip);
  }
  return out;
}

InterpWeights interpolation_weights(const RowMatrixXd& coarse_pts, const RowMatrixXd& fine_pts) {
  const Index m = coarse_pts.rows(), n = fine_pts.rows();
  if (m < 1) throw InputError("interpolation_weights: empty coarse set");
  const Index p = std::min<Index>(3, m);
  InterpWeights out;
  out.idx = knn_rows(coarse_pts, fine_pts, p);
  out.w.resize(n, p);
  for (Index i = 0; i < n; ++i) {
    // Nearest-first rows mean a coincident coarse point, if any, sits in
    // column 0; it takes the full weight for an exact feature copy.
    double d2_0 = 0;
    {
      const double dx = coarse_pts(out.idx(i, 0), 0) - fine_pts(i, 0);
      const double dy = coarse_pts(out.idx(i, 0), 1) - fine_pts(i, 1);
      const double dz = coarse_pts(out.idx(i, 0), 2) - fine_pts(i, 2);
      d2_0 = dx * dx + dy * dy + dz * dz;
    }
    if (d2_0 == 0.0) {
      out.w.row(i).setZero();
      out.w(i, 0) = 1.0;
      continue;
    }
    double total = 0;
    for (Index j = 0; j < p; ++j) {
      const double dx = coarse_pts(out.idx(i, j), 0) - fine_pts(i, 0);
      const double dy = coarse_pts(out.idx(i, j), 1) - fine_pts(i, 1);
      const double dz = coarse_pts(out.idx(i, j), 2) - fine_pts(i, 2);
      const double w = 1.0 / (dx * dx + dy * dy + dz * dz);
      out.w(i, j) = w;
      total += w;
    }
    out.w.row(i) /= total;
  }
  return out;
}

RowMatrixXd interpolate_features(const RowMatrixXd& coarse_pts, const RowMatrixXd& coarse_feats,
                                 const RowMatrixXd& fine_pts) {
  if (coarse_pts.rows() != coarse_feats.rows())
    throw DimensionError("interpolate_features: " + std::to_string(coarse_pts.rows()) + " coarse points vs " +
                         std::to_string(coarse_feats.rows()) + " feature rows");
  const InterpWeights iw = interpolation_weights(coarse_pts, fine_pts);
  RowMatrixXd out = RowMatrixXd::Zero(fine_pts.rows(), coarse_feats.cols());
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < iw.idx.cols(); ++j) out.row(i) += iw.w(i, j) * coarse_feats.row(iw.idx(i, j));
  return out;
}

namespace ops {

TensorPtr apply_interpolation(Tape& tape, const TensorPtr& coarse_feats, const InterpWeights& w) {
  if (coarse_feats->rank() != 2)
    throw DimensionError("apply_interpolation expects rank-2 features, got " + shape_str(coarse_feats->shape));
  const Index m = coarse_feats->dim(0), c = coarse_feats->dim(1);
  const Index n = w.idx.rows(), p = w.idx.cols();
  if (w.w.rows() != n || w.w.cols() != p)
    throw DimensionError("apply_interpolation: weight table does not match index table");
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j)
      if (w.idx(i, j) < 0 || w.idx(i, j) >= m)
        throw InputError("apply_interpolation: coarse index out of range");
  auto y = Tensor::zeros({n, c});
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) y->matrix().row(i) += w.w(i, j) * coarse_feats->matrix().row(w.idx(i, j));
  if (coarse_feats->requires_grad) {
    y->requires_grad = true;
    auto saved = std::make_shared<InterpWeights>(w);
    tape.record("apply_interpolation", [coarse_feats, y, saved, n, p] {
      if (y->grad.size() == 0) return;
      coarse_feats->ensure_grad();
      Eigen::Map<const RowMatrixXd> gy(y->grad.data(), y->rows(), y->channels());
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < p; ++j)
          coarse_feats->grad_matrix().row(saved->idx(i, j)) += saved->w(i, j) * gy.row(i);
    });
  }
  return y;
}

TensorPtr build_edge_features(Tape& tape, const TensorPtr& feats, std::span<const int> centers,
                              const RowArrayXXi& neighbors, EdgeFeatureVariant variant) {
  if (feats->rank() != 2)
    throw DimensionError("build_edge_features expects rank-2 features, got " + shape_str(feats->shape));
  if (static_cast<Index>(centers.size()) != neighbors.rows())
    throw DimensionError("build_edge_features: " + std::to_string(centers.size()) + " centers vs " +
                         std::to_string(neighbors.rows()) + " neighbor rows");
  const Index k = neighbors.cols();
  auto center_feats = gather_rows(tape, feats, centers);
  auto center_rep = expand_neighbors(tape, center_feats, k);                       // M x K x F
  auto nbr_feats = gather_neighbors(tape, feats, neighbors);                       // M x K x F
  switch (variant) {
    case EdgeFeatureVariant::CenterRelative:
      return concat_channels(tape, center_rep, sub(tape, center_rep, nbr_feats));
    case EdgeFeatureVariant::CenterNeighbor:
      return concat_channels(tape, center_rep, nbr_feats);
    case EdgeFeatureVariant::CenterNeighborRelative:
      return concat_channels(tape, concat_channels(tape, center_rep, nbr_feats),
                             sub(tape, center_rep, nbr_feats));
  }
  throw ConfigError("unknown edge feature variant");
}

TensorPtr build_edge_features(Tape& tape, const TensorPtr& feats, const NeighborIndex& neighbors,
                              EdgeFeatureVariant variant) {
  std::vector<int> centers(static_cast<std::size_t>(neighbors.indices.rows()));
  std::iota(centers.begin(), centers.end(), 0);
  return build_edge_features(tape, feats, centers, neighbors.indices, variant);
}

}  // namespace ops

}  // namespace spn
