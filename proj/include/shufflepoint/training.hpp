#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shufflepoint/model.hpp"

namespace spn {

struct ScheduleConfig {
  double lr0 = 0.001;
  double lr_decay = 0.7;
  int lr_period = 20;
  double lr_floor = 1e-5;
  double bn_m0 = 0.9;
  double bn_decay = 0.5;
  int bn_period = 20;
  double bn_cap = 0.99;

  void validate() const;
};

// max(lr_floor, lr0 * lr_decay^floor(epoch/lr_period)); the power is built by
// repeated multiplication so the emitted values are exactly reproducible.
double lr_schedule(int epoch, const ScheduleConfig& cfg);

// min(bn_cap, 1 - (1-bn_m0) * bn_decay^floor(epoch/bn_period)): the gap to 1
// shrinks by bn_decay each period, capped at bn_cap.
double bn_momentum_schedule(int epoch, const ScheduleConfig& cfg);

// Standard Adam with bias correction over a fixed parameter list. lr may be
// zero (no-op update); non-finite gradients raise TrainingError naming the
// parameter.
class Adam {
 public:
  explicit Adam(std::vector<NamedTensor> params, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(double lr);
  long long step_count() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<ArrayX<double>> m_, v_;
  long long t_ = 0;
  double beta1_, beta2_, epsilon_;
  double beta1_pow_ = 1.0, beta2_pow_ = 1.0;
};

struct ClassStat {
  std::int64_t label = 0;
  Index correct = 0;
  Index total = 0;
  double accuracy = 0;
};

struct MetricSet {
  double overall_accuracy = 0;
  double mean_class_accuracy = 0;
  std::optional<double> miou;  // segmentation only
  std::vector<ClassStat> per_class;
};

std::string metrics_json(const MetricSet& m);

// Category -> the part labels that may appear on its shapes.
struct PartSets {
  std::map<std::int64_t, std::vector<std::int64_t>> parts;

  const std::vector<std::int64_t>& parts_of(std::int64_t category) const;
  std::int64_t category_of_part(std::int64_t part) const;
};

// Mean IoU over the category's part set for one shape. A part absent from
// both prediction and truth scores 1; a label outside the category's set is
// an input error. The dataset-level mIoU is the mean of this over shapes.
double compute_miou(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth,
                    std::int64_t category, const PartSets& part_sets);

// Four shape classes (sphere 0, cube 1, plane 2, torus 3), uniformly sampled
// surfaces, unit-sphere normalized, class-major order. With per-point labels
// each class splits into fixed parts (9 global part labels).
std::vector<PointCloud> synth_dataset(Index n_per_class, Index n_points, std::uint64_t seed,
                                      bool per_point_labels = false);
PartSets synth_part_sets();
inline constexpr Index kSynthClasses = 4;
inline constexpr Index kSynthParts = 9;

// Deterministic shuffled split; eval receives ceil(fraction * size) clouds.
void split_dataset(const std::vector<PointCloud>& all, double eval_fraction, std::uint64_t seed,
                   std::vector<PointCloud>* train_set, std::vector<PointCloud>* eval_set);

struct TrainOptions {
  int epochs = 30;
  Index batch = 32;
  ScheduleConfig sched;
  std::uint64_t seed = 42;
  AugmentParams aug;
  bool augment = true;
  int threads = 1;  // evaluation parallelism
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double bn_momentum = 0;
  double train_loss = 0;
  double train_acc = 0;
  double eval_acc = 0;
  double wall_ms = 0;
};

std::string epoch_log_json(const EpochLog& log);

struct TrainResult {
  std::vector<EpochLog> log;
};

// Mini-batch loop: augment -> forward -> cross-entropy -> backward -> Adam,
// schedules applied per epoch, one JSON log line per epoch when log_out is
// given. Deterministic for a fixed seed. Works for both model kinds
// (segmentation needs part_sets for masked evaluation).
TrainResult train(Model& model, const std::vector<PointCloud>& train_set,
                  const std::vector<PointCloud>& eval_set, const TrainOptions& opts,
                  const PartSets* part_sets = nullptr, std::ostream* log_out = nullptr);

MetricSet evaluate_classifier(Model& model, const std::vector<PointCloud>& clouds, int threads = 1);
MetricSet evaluate_segmenter(Model& model, const std::vector<PointCloud>& clouds,
                             const PartSets& part_sets, int threads = 1);

// Per-point prediction with the argmax masked to the shape category's parts.
std::vector<std::int64_t> predict_parts(Model& model, const PointCloud& cloud,
                                        std::int64_t category, const PartSets& part_sets);

}  // namespace spn
