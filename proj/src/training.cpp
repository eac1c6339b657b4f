#include "shufflepoint/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "shufflepoint/log.hpp"
#include "shufflepoint/rng.hpp"

namespace spn {

void ScheduleConfig::validate() const {
  if (lr0 < 0.0) throw ConfigError("schedule: lr0 must be non-negative");
  if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("schedule: lr_decay must be in (0,1)");
  if (lr_period < 1) throw ConfigError("schedule: lr_period must be at least 1");
  if (lr_floor < 0.0) throw ConfigError("schedule: lr_floor must be non-negative");
  if (!(bn_m0 > 0.0 && bn_m0 < 1.0)) throw ConfigError("schedule: bn_m0 must be in (0,1)");
  if (!(bn_decay > 0.0 && bn_decay < 1.0)) throw ConfigError("schedule: bn_decay must be in (0,1)");
  if (bn_period < 1) throw ConfigError("schedule: bn_period must be at least 1");
  if (!(bn_cap > 0.0 && bn_cap < 1.0)) throw ConfigError("schedule: bn_cap must be in (0,1)");
}

double lr_schedule(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 0) throw UsageError("lr_schedule: epoch must be non-negative");
  double lr = cfg.lr0;
  for (int i = 0; i < epoch / cfg.lr_period; ++i) lr *= cfg.lr_decay;
  return std::max(cfg.lr_floor, lr);
}

double bn_momentum_schedule(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 0) throw UsageError("bn_momentum_schedule: epoch must be non-negative");
  double gap = 1.0 - cfg.bn_m0;
  for (int i = 0; i < epoch / cfg.bn_period; ++i) gap *= cfg.bn_decay;
  return std::min(cfg.bn_cap, 1.0 - gap);
}

Adam::Adam(std::vector<NamedTensor> params, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(ArrayX<double>::Zero(p.tensor->size()));
    v_.push_back(ArrayX<double>::Zero(p.tensor->size()));
  }
}

void Adam::step(double lr) {
  if (lr < 0.0) throw UsageError("Adam::step: negative learning rate");
  ++t_;
  beta1_pow_ *= beta1_;
  beta2_pow_ *= beta2_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i].tensor;
    p.ensure_grad();
    if (!p.grad.isFinite().all())
      throw TrainingError("non-finite gradient in parameter '" + params_[i].name + "' at step " +
                          std::to_string(t_));
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.square();
    const ArrayX<double> m_hat = m_[i] / (1.0 - beta1_pow_);
    const ArrayX<double> v_hat = v_[i] / (1.0 - beta2_pow_);
    p.values -= lr * m_hat / (v_hat.sqrt() + epsilon_);
  }
}

std::string metrics_json(const MetricSet& m) {
  nlohmann::json j;
  j["overall_accuracy"] = m.overall_accuracy;
  j["mean_class_accuracy"] = m.mean_class_accuracy;
  if (m.miou) j["miou"] = *m.miou;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : m.per_class) {
    nlohmann::json row;
    row["label"] = c.label;
    row["correct"] = c.correct;
    row["total"] = c.total;
    row["accuracy"] = c.accuracy;
    rows.push_back(std::move(row));
  }
  j["per_class"] = std::move(rows);
  return j.dump(2);
}

const std::vector<std::int64_t>& PartSets::parts_of(std::int64_t category) const {
  auto it = parts.find(category);
  if (it == parts.end()) throw InputError("unknown shape category " + std::to_string(category));
  return it->second;
}

std::int64_t PartSets::category_of_part(std::int64_t part) const {
  for (const auto& [cat, set] : parts)
    if (std::find(set.begin(), set.end(), part) != set.end()) return cat;
  throw InputError("part label " + std::to_string(part) + " belongs to no category");
}

double compute_miou(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth,
                    std::int64_t category, const PartSets& part_sets) {
  if (pred.size() != truth.size())
    throw DimensionError("compute_miou: prediction and truth sizes differ");
  if (pred.empty()) throw InputError("compute_miou: empty label arrays");
  const auto& parts = part_sets.parts_of(category);
  auto in_set = [&parts](std::int64_t v) { return std::find(parts.begin(), parts.end(), v) != parts.end(); };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!in_set(pred[i]))
      throw InputError("predicted label " + std::to_string(pred[i]) + " outside category " +
                       std::to_string(category) + "'s part set");
    if (!in_set(truth[i]))
      throw InputError("truth label " + std::to_string(truth[i]) + " outside category " +
                       std::to_string(category) + "'s part set");
  }
  double sum = 0;
  for (std::int64_t part : parts) {
    Index inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == part, t = truth[i] == part;
      inter += p && t;
      uni += p || t;
    }
    sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return sum / static_cast<double>(parts.size());
}

namespace {

// Part labels are globally distinct: sphere {0,1}, cube {2,3,4}, plane {5,6},
// torus {7,8}.
PointCloud synth_cloud(Index category, Index n_points, std::mt19937_64& rng, bool per_point_labels) {
  PointCloud cloud;
  cloud.data.resize(n_points, 3);
  VectorXi64 parts(n_points);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Index i = 0; i < n_points; ++i) {
    double x = 0, y = 0, z = 0;
    std::int64_t part = 0;
    switch (category) {
      case 0: {  // sphere surface
        do {
          x = gauss(rng);
          y = gauss(rng);
          z = gauss(rng);
        } while (x * x + y * y + z * z < 1e-12);
        const double inv = 1.0 / std::sqrt(x * x + y * y + z * z);
        x *= inv;
        y *= inv;
        z *= inv;
        part = z >= 0 ? 0 : 1;
        break;
      }
      case 1: {  // cube surface
        const int face = static_cast<int>(std::floor(u01(rng) * 6.0)) % 6;
        const double u = unit(rng), v = unit(rng);
        const double sign = face % 2 ? -1.0 : 1.0;
        if (face / 2 == 0) {
          x = sign;
          y = u;
          z = v;
          part = 3;
        } else if (face / 2 == 1) {
          x = u;
          y = sign;
          z = v;
          part = 4;
        } else {
          x = u;
          y = v;
          z = sign;
          part = 2;
        }
        break;
      }
      case 2: {  // plane patch
        x = unit(rng);
        y = unit(rng);
        z = 0.0;
        part = x < 0 ? 5 : 6;
        break;
      }
      case 3: {  // torus, major R=1, minor r=0.4; phi rejection keeps the
                 // surface density uniform
        const double R = 1.0, r = 0.4;
        const double theta = u01(rng) * 2.0 * M_PI;
        double phi;
        do {
          phi = u01(rng) * 2.0 * M_PI;
        } while (u01(rng) >= (R + r * std::cos(phi)) / (R + r));
        x = (R + r * std::cos(phi)) * std::cos(theta);
        y = (R + r * std::cos(phi)) * std::sin(theta);
        z = r * std::sin(phi);
        part = std::cos(phi) >= 0 ? 7 : 8;
        break;
      }
      default:
        throw UsageError("synth_cloud: unknown category " + std::to_string(category));
    }
    cloud.data(i, 0) = x;
    cloud.data(i, 1) = y;
    cloud.data(i, 2) = z;
    parts[i] = part;
  }
  cloud = normalize_unit_sphere(cloud);
  if (per_point_labels) {
    cloud.label_mode = LabelMode::per_point;
    cloud.labels = std::move(parts);
  } else {
    cloud.label_mode = LabelMode::per_cloud;
    cloud.labels.resize(1);
    cloud.labels[0] = category;
  }
  return cloud;
}

}  // namespace

std::vector<PointCloud> synth_dataset(Index n_per_class, Index n_points, std::uint64_t seed,
                                      bool per_point_labels) {
  if (n_per_class < 1) throw UsageError("synth_dataset: n_per_class must be positive");
  if (n_points < 32) throw UsageError("synth_dataset: n_points must be at least 32");
  std::vector<PointCloud> out;
  out.reserve(static_cast<std::size_t>(n_per_class * kSynthClasses));
  for (Index c = 0; c < kSynthClasses; ++c) {
    for (Index i = 0; i < n_per_class; ++i) {
      auto rng = make_rng(seed, "synth", static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i));
      out.push_back(synth_cloud(c, n_points, rng, per_point_labels));
    }
  }
  return out;
}

PartSets synth_part_sets() {
  PartSets ps;
  ps.parts[0] = {0, 1};
  ps.parts[1] = {2, 3, 4};
  ps.parts[2] = {5, 6};
  ps.parts[3] = {7, 8};
  return ps;
}

void split_dataset(const std::vector<PointCloud>& all, double eval_fraction, std::uint64_t seed,
                   std::vector<PointCloud>* train_set, std::vector<PointCloud>* eval_set) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0)
    throw UsageError("split_dataset: eval fraction must be in [0,1)");
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed, "split");
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_eval = static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(all.size())));
  train_set->clear();
  eval_set->clear();
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_eval ? eval_set : train_set)->push_back(all[order[i]]);
}

namespace {

template <typename Derived>
Index argmax_row(const Eigen::DenseBase<Derived>& m, Index row) {
  Index best = 0;
  for (Index j = 1; j < m.cols(); ++j)
    if (m(row, j) > m(row, best)) best = j;
  return best;
}

std::int64_t cloud_category(const PointCloud& cloud, const Model& model, const PartSets* part_sets) {
  if (model.kind == ModelKind::classifier) {
    if (cloud.label_mode != LabelMode::per_cloud)
      throw InputError("classification requires per-cloud labels");
    return cloud.labels[0];
  }
  if (cloud.label_mode != LabelMode::per_point)
    throw InputError("segmentation requires per-point labels");
  if (!part_sets) throw UsageError("segmentation requires part sets");
  return part_sets->category_of_part(cloud.labels[0]);
}

// Runs fn(i) over [0,n) on `threads` workers; results must be written into
// preallocated per-index slots so the reduction order stays fixed.
void parallel_for(Index n, int threads, const std::function<void(Index)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  auto worker = [&next, n, &fn] {
    for (Index i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  const int use = std::min<int>(threads, static_cast<int>(n));
  pool.reserve(static_cast<std::size_t>(use));
  for (int t = 0; t < use; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

MetricSet finalize_metrics(std::vector<ClassStat> stats, std::optional<double> miou) {
  MetricSet m;
  Index correct = 0, total = 0;
  double acc_sum = 0;
  Index present = 0;
  for (auto& s : stats) {
    correct += s.correct;
    total += s.total;
    if (s.total > 0) {
      s.accuracy = static_cast<double>(s.correct) / static_cast<double>(s.total);
      acc_sum += s.accuracy;
      ++present;
    }
  }
  m.overall_accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  m.mean_class_accuracy = present > 0 ? acc_sum / static_cast<double>(present) : 0.0;
  m.miou = miou;
  m.per_class = std::move(stats);
  return m;
}

}  // namespace

MetricSet evaluate_classifier(Model& model, const std::vector<PointCloud>& clouds, int threads) {
  if (model.kind != ModelKind::classifier) throw UsageError("evaluate_classifier: model is a segmenter");
  if (clouds.empty()) throw InputError("evaluate_classifier: empty dataset");
  std::vector<std::int64_t> truth(clouds.size()), pred(clouds.size());
  parallel_for(static_cast<Index>(clouds.size()), threads, [&](Index i) {
    const auto& cloud = clouds[static_cast<std::size_t>(i)];
    if (cloud.label_mode != LabelMode::per_cloud)
      throw InputError("classification eval requires per-cloud labels");
    Tape tape;
    auto fr = forward(model, cloud, tape, {});
    truth[static_cast<std::size_t>(i)] = cloud.labels[0];
    pred[static_cast<std::size_t>(i)] = argmax_row(fr.logits->matrix(), 0);
  });
  std::vector<ClassStat> stats(static_cast<std::size_t>(model.cfg.n_classes));
  for (Index c = 0; c < model.cfg.n_classes; ++c) stats[static_cast<std::size_t>(c)].label = c;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= model.cfg.n_classes)
      throw InputError("cloud label " + std::to_string(truth[i]) + " outside [0, " +
                       std::to_string(model.cfg.n_classes) + ")");
    auto& s = stats[static_cast<std::size_t>(truth[i])];
    s.total += 1;
    s.correct += pred[i] == truth[i];
  }
  return finalize_metrics(std::move(stats), std::nullopt);
}

std::vector<std::int64_t> predict_parts(Model& model, const PointCloud& cloud, std::int64_t category,
                                        const PartSets& part_sets) {
  if (model.kind != ModelKind::segmenter) throw UsageError("predict_parts: model is a classifier");
  const auto& parts = part_sets.parts_of(category);
  Tape tape;
  auto fr = forward(model, cloud, tape, {});
  const auto logits = fr.logits->matrix();
  std::vector<std::int64_t> pred(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    std::int64_t best = parts[0];
    for (std::int64_t p : parts) {
      if (p < 0 || p >= logits.cols())
        throw InputError("part label " + std::to_string(p) + " outside model's class range");
      if (logits(i, p) > logits(i, best)) best = p;
    }
    pred[static_cast<std::size_t>(i)] = best;
  }
  return pred;
}

MetricSet evaluate_segmenter(Model& model, const std::vector<PointCloud>& clouds,
                             const PartSets& part_sets, int threads) {
  if (model.kind != ModelKind::segmenter) throw UsageError("evaluate_segmenter: model is a classifier");
  if (clouds.empty()) throw InputError("evaluate_segmenter: empty dataset");
  std::vector<double> shape_ious(clouds.size());
  std::vector<std::int64_t> categories(clouds.size());
  std::vector<Index> corrects(clouds.size()), totals(clouds.size());
  parallel_for(static_cast<Index>(clouds.size()), threads, [&](Index idx) {
    const std::size_t i = static_cast<std::size_t>(idx);
    const auto& cloud = clouds[i];
    const std::int64_t category = cloud_category(cloud, model, &part_sets);
    auto pred = predict_parts(model, cloud, category, part_sets);
    std::span<const std::int64_t> truth(cloud.labels.data(), static_cast<std::size_t>(cloud.labels.size()));
    shape_ious[i] = compute_miou(pred, truth, category, part_sets);
    categories[i] = category;
    Index correct = 0;
    for (std::size_t p = 0; p < pred.size(); ++p) correct += pred[p] == truth[p];
    corrects[i] = correct;
    totals[i] = static_cast<Index>(pred.size());
  });
  std::map<std::int64_t, ClassStat> by_cat;
  double iou_sum = 0;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    auto& s = by_cat[categories[i]];
    s.label = categories[i];
    s.correct += corrects[i];
    s.total += totals[i];
    iou_sum += shape_ious[i];
  }
  std::vector<ClassStat> stats;
  for (auto& [_, s] : by_cat) stats.push_back(s);
  return finalize_metrics(std::move(stats), iou_sum / static_cast<double>(clouds.size()));
}

std::string epoch_log_json(const EpochLog& log) {
  nlohmann::json j;
  j["epoch"] = log.epoch;
  j["lr"] = log.lr;
  j["bn_momentum"] = log.bn_momentum;
  j["train_loss"] = log.train_loss;
  j["train_acc"] = log.train_acc;
  j["eval_acc"] = log.eval_acc;
  j["wall_ms"] = log.wall_ms;
  return j.dump();
}

TrainResult train(Model& model, const std::vector<PointCloud>& train_set,
                  const std::vector<PointCloud>& eval_set, const TrainOptions& opts,
                  const PartSets* part_sets, std::ostream* log_out) {
  if (train_set.empty()) throw TrainingError("training set is empty");
  if (opts.epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (opts.batch < 1) throw ConfigError("train: batch size must be at least 1");
  opts.sched.validate();
  if (model.kind == ModelKind::segmenter && !part_sets)
    throw UsageError("train: segmentation needs part sets for evaluation");

  Adam adam(model.parameters());
  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, opts.sched);
    const double bn_m = bn_momentum_schedule(epoch, opts.sched);
    model.set_bn_momentum(bn_m);

    auto shuffle_rng = make_rng(opts.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    Index correct = 0, total = 0, n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opts.batch));
      Tape tape;
      // One joint forward per batch so batch-norm statistics span the whole
      // mini-batch; per-cloud forwards would let each cloud self-normalize in
      // a way the eval-time running stats cannot reproduce.
      std::vector<PointCloud> augmented;
      augmented.reserve(stop - start);
      std::vector<const PointCloud*> batch_clouds;
      batch_clouds.reserve(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        const PointCloud* cloud = &train_set[idx];
        if (opts.augment) {
          augmented.push_back(augment(*cloud, mix_seed(opts.seed, "augment", static_cast<std::uint64_t>(epoch),
                                                       static_cast<std::uint64_t>(idx)),
                                      opts.aug));
          cloud = &augmented.back();
        }
        batch_clouds.push_back(cloud);
      }
      ForwardOptions fopts;
      fopts.training = true;
      fopts.dropout_seed = mix_seed(opts.seed, "dropout", static_cast<std::uint64_t>(epoch),
                                    static_cast<std::uint64_t>(n_batches));
      auto fr = forward_batch(model, batch_clouds, tape, fopts);
      std::vector<std::int64_t> labels;
      if (model.kind == ModelKind::classifier) {
        labels.reserve(batch_clouds.size());
        for (const PointCloud* cloud : batch_clouds) labels.push_back(cloud->labels[0]);
      } else {
        labels.reserve(static_cast<std::size_t>(fr.logits->dim(0)));
        for (const PointCloud* cloud : batch_clouds)
          labels.insert(labels.end(), cloud->labels.data(), cloud->labels.data() + cloud->labels.size());
      }
      const auto logits = fr.logits->matrix();
      for (Index i = 0; i < logits.rows(); ++i)
        correct += argmax_row(logits, i) == labels[static_cast<std::size_t>(i)];
      total += logits.rows();
      auto batch_loss = ops::softmax_cross_entropy(
          tape, fr.logits, std::span<const std::int64_t>(labels.data(), labels.size()));
      const double loss_value = batch_loss->values[0];
      if (!std::isfinite(loss_value))
        throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                            ", batch " + std::to_string(n_batches + 1));
      loss_sum += loss_value;
      ++n_batches;
      tape.backward(batch_loss);
      adam.step(lr);
      model.zero_grad();
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    log.bn_momentum = bn_m;
    log.train_loss = loss_sum / static_cast<double>(n_batches);
    log.train_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    if (!eval_set.empty()) {
      const MetricSet m = model.kind == ModelKind::classifier
                              ? evaluate_classifier(model, eval_set, opts.threads)
                              : evaluate_segmenter(model, eval_set, *part_sets, opts.threads);
      log.eval_acc = m.overall_accuracy;
    }
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (log_out) (*log_out) << epoch_log_json(log) << "\n";
    spn::log::debug("epoch " + std::to_string(log.epoch) + " loss " + std::to_string(log.train_loss) +
                    " eval_acc " + std::to_string(log.eval_acc));
    result.log.push_back(log);
  }
  return result;
}

}  // namespace spn
