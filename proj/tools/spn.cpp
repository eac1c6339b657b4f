// spn: train, evaluate, and analyze point-cloud classifiers/segmenters built
// on grouped 1x1 convolutions with channel shuffling over k-NN edge features.
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shufflepoint/checkpoint.hpp"
#include "shufflepoint/cloud_io.hpp"
#include "shufflepoint/complexity.hpp"
#include "shufflepoint/errors.hpp"
#include "shufflepoint/gradcheck.hpp"
#include "shufflepoint/log.hpp"
#include "shufflepoint/model.hpp"
#include "shufflepoint/model_gradcheck.hpp"
#include "shufflepoint/pointcloud.hpp"
#include "shufflepoint/rng.hpp"
#include "shufflepoint/training.hpp"

namespace fs = std::filesystem;
using namespace spn;

namespace {

struct Opts {
  std::uint64_t seed = 42;
  int epochs = 30;
  std::uint32_t batch = 32;
  std::uint32_t groups = 0;       // 0 = keep per-stage defaults
  std::uint32_t k = 0;            // 0 = keep per-stage defaults
  std::uint32_t points = 0;       // 0 = per-command default
  std::string edge_variant = "a";
  std::string neighbor = "knn";
  double radius = 0.2;
  bool synth = false;
  std::string data;
  std::string eval_data;
  std::string out;
  std::string model_path;
  std::uint32_t threads = 1;
  std::string sweep_groups;
  std::uint32_t per_class = 200;
  std::uint32_t in_channels = 0;  // 0 = infer from data
  std::uint32_t classes = 0;      // 0 = infer from labels
  double dropout = -1;            // <0 = keep default
  double lr0 = 0.001;
  double holdout = 0.2;
  bool no_augment = false;
  bool segmentation = false;
  bool measure = false;
  std::uint32_t trials = 3;
  bool inject_fault = false;
  std::string format = "binary";
};

EdgeFeatureVariant parse_edge_variant(const std::string& v) {
  if (v == "a") return EdgeFeatureVariant::CenterRelative;
  if (v == "b") return EdgeFeatureVariant::CenterNeighbor;
  if (v == "c") return EdgeFeatureVariant::CenterNeighborRelative;
  throw UsageError("unknown edge variant '" + v + "' (expected a, b, or c)");
}

NeighborMethod parse_neighbor(const std::string& v) {
  if (v == "knn") return NeighborMethod::knn;
  if (v == "radius") return NeighborMethod::radius;
  throw UsageError("unknown neighbor method '" + v + "' (expected knn or radius)");
}

std::vector<Index> parse_group_list(const std::string& list) {
  std::vector<Index> gs;
  std::string item;
  std::istringstream in(list);
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      throw UsageError("--sweep-groups: '" + item + "' is not an integer");
    }
    if (pos != item.size() || v <= 0)
      throw UsageError("--sweep-groups: '" + item + "' is not a positive integer");
    gs.push_back(static_cast<Index>(v));
  }
  if (gs.empty()) throw UsageError("--sweep-groups: empty list");
  return gs;
}

void apply_model_flags(ModelConfig& cfg, const Opts& o) {
  if (o.groups > 0)
    for (auto& s : cfg.stages) s.sgc.g = static_cast<Index>(o.groups);
  if (o.k > 0)
    for (auto& s : cfg.stages) {
      s.k = static_cast<Index>(o.k);
      s.sgc.k = s.k;
    }
  const EdgeFeatureVariant v = parse_edge_variant(o.edge_variant);
  for (auto& s : cfg.stages) s.sgc.edge_variant = v;
  cfg.neighbor = parse_neighbor(o.neighbor);
  cfg.radius = o.radius;
  if (o.dropout >= 0) cfg.dropout_rate = o.dropout;
}

std::vector<PointCloud> normalize_all(std::vector<PointCloud> clouds) {
  for (auto& c : clouds) c = normalize_unit_sphere(c);
  return clouds;
}

std::int64_t max_label(const PointCloud& c) {
  if (c.label_mode == LabelMode::none || c.labels.size() == 0)
    throw InputError("cloud has no labels; training and evaluation need labeled data");
  return c.labels.maxCoeff();
}

Index infer_classes(const std::vector<PointCloud>& a, const std::vector<PointCloud>& b) {
  std::int64_t hi = -1;
  for (const auto& c : a) hi = std::max(hi, max_label(c));
  for (const auto& c : b) hi = std::max(hi, max_label(c));
  if (hi < 1) throw InputError("labels span fewer than two classes");
  return static_cast<Index>(hi + 1);
}

// Without a category map, every observed part label lives in one category.
PartSets single_category_parts(const std::vector<PointCloud>& a, const std::vector<PointCloud>& b) {
  std::set<std::int64_t> seen;
  auto scan = [&seen](const std::vector<PointCloud>& clouds) {
    for (const auto& c : clouds) {
      if (c.label_mode != LabelMode::per_point)
        throw InputError("segmentation needs per-point labels");
      for (Index i = 0; i < c.labels.size(); ++i) seen.insert(c.labels[i]);
    }
  };
  scan(a);
  scan(b);
  PartSets ps;
  ps.parts[0] = std::vector<std::int64_t>(seen.begin(), seen.end());
  return ps;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

struct Dataset {
  std::vector<PointCloud> train_set, eval_set;
  PartSets parts;
  bool has_parts = false;
};

Dataset assemble_dataset(const Opts& o, bool split) {
  Dataset d;
  const Index pts = static_cast<Index>(o.points ? o.points : 256);
  if (o.synth) {
    auto all = synth_dataset(static_cast<Index>(o.per_class), pts, o.seed, o.segmentation);
    if (split)
      split_dataset(all, o.holdout, o.seed, &d.train_set, &d.eval_set);
    else
      d.eval_set = std::move(all);
    if (o.segmentation) {
      d.parts = synth_part_sets();
      d.has_parts = true;
    }
    return d;
  }
  if (o.data.empty()) throw UsageError("provide --data PATH or --synth");
  auto all = normalize_all(load_dataset(o.data));
  if (!split) {
    d.eval_set = std::move(all);
  } else if (!o.eval_data.empty()) {
    d.train_set = std::move(all);
    d.eval_set = normalize_all(load_dataset(o.eval_data));
  } else {
    split_dataset(all, o.holdout, o.seed, &d.train_set, &d.eval_set);
  }
  if (o.segmentation) {
    d.parts = single_category_parts(d.train_set, d.eval_set);
    d.has_parts = true;
  }
  return d;
}

int cmd_train(const Opts& o) {
  Dataset d = assemble_dataset(o, /*split=*/true);
  if (d.train_set.empty()) throw InputError("training set is empty");
  const std::vector<PointCloud>& metric_set = d.eval_set.empty() ? d.train_set : d.eval_set;

  Index n_classes = static_cast<Index>(o.classes);
  if (n_classes == 0) {
    if (o.synth)
      n_classes = o.segmentation ? kSynthParts : kSynthClasses;
    else
      n_classes = infer_classes(d.train_set, d.eval_set);
  }
  const Index in_ch =
      o.in_channels ? static_cast<Index>(o.in_channels) : d.train_set[0].n_channels();

  ModelConfig cfg = o.segmentation ? default_segmenter_config(n_classes, in_ch)
                                   : default_classifier_config(n_classes, in_ch);
  apply_model_flags(cfg, o);
  cfg.validate();
  Model model = o.segmentation ? build_segmenter(cfg, o.seed) : build_classifier(cfg, o.seed);

  TrainOptions topts;
  topts.epochs = o.epochs;
  topts.batch = static_cast<Index>(o.batch);
  topts.seed = o.seed;
  topts.threads = static_cast<int>(o.threads);
  topts.augment = !o.no_augment;
  topts.sched.lr0 = o.lr0;
  topts.sched.validate();

  const fs::path out_dir = o.out.empty() ? fs::path("out") : fs::path(o.out);
  fs::create_directories(out_dir);
  std::ofstream log_stream(out_dir / "train_log.jsonl", std::ios::binary);
  if (!log_stream) throw IoError("cannot open " + (out_dir / "train_log.jsonl").string());

  log::info("training " + std::string(o.segmentation ? "segmenter" : "classifier") + " on " +
            std::to_string(d.train_set.size()) + " clouds (" + std::to_string(metric_set.size()) +
            " held out)");
  train(model, d.train_set, metric_set, topts, d.has_parts ? &d.parts : nullptr, &log_stream);
  log_stream.close();

  save_model(model, (out_dir / "model.spnm").string());

  const MetricSet m = o.segmentation
                          ? evaluate_segmenter(model, metric_set, d.parts, static_cast<int>(o.threads))
                          : evaluate_classifier(model, metric_set, static_cast<int>(o.threads));
  const std::string mjson = metrics_json(m);
  write_text_file(out_dir / "metrics.json", mjson + "\n");
  std::cout << mjson << "\n";
  log::info("checkpoint written to " + (out_dir / "model.spnm").string());
  return 0;
}

int cmd_eval(const Opts& o, bool segmentation_cmd) {
  if (o.model_path.empty()) throw UsageError("--model PATH is required");
  Model model = load_model(o.model_path);
  if (!segmentation_cmd && model.kind != ModelKind::classifier)
    throw UsageError("checkpoint holds a segmentation model; use the segment command");
  if (segmentation_cmd && model.kind != ModelKind::segmenter)
    throw UsageError("checkpoint holds a classifier; use the eval command");

  Opts local = o;
  local.segmentation = segmentation_cmd;
  // --synth evaluates on the same held-out split a --synth training run used.
  Dataset d = assemble_dataset(local, /*split=*/o.synth);
  if (d.eval_set.empty()) throw InputError("evaluation set is empty");

  MetricSet m;
  if (segmentation_cmd)
    m = evaluate_segmenter(model, d.eval_set, d.parts, static_cast<int>(o.threads));
  else
    m = evaluate_classifier(model, d.eval_set, static_cast<int>(o.threads));

  const std::string mjson = metrics_json(m);
  std::cout << mjson << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "metrics.json", mjson + "\n");
    if (segmentation_cmd) {
      for (std::size_t i = 0; i < d.eval_set.size(); ++i) {
        const PointCloud& cloud = d.eval_set[i];
        const std::int64_t category = d.parts.category_of_part(cloud.labels[0]);
        const auto pred = predict_parts(model, cloud, category, d.parts);
        std::string text;
        for (std::int64_t p : pred) text += std::to_string(p) + "\n";
        char name[32];
        std::snprintf(name, sizeof(name), "pred_%05zu.txt", i);
        write_text_file(fs::path(o.out) / name, text);
      }
    }
  }
  return 0;
}

int cmd_complexity(const Opts& o) {
  const Index n_classes =
      o.classes ? static_cast<Index>(o.classes) : (o.segmentation ? kSynthParts : kSynthClasses);
  const Index in_ch = o.in_channels ? static_cast<Index>(o.in_channels) : 3;
  ModelConfig cfg = o.segmentation ? default_segmenter_config(n_classes, in_ch)
                                   : default_classifier_config(n_classes, in_ch);
  apply_model_flags(cfg, o);
  cfg.validate();
  const ModelKind kind = o.segmentation ? ModelKind::segmenter : ModelKind::classifier;
  const Index n_points = static_cast<Index>(o.points ? o.points : 1024);

  if (!o.sweep_groups.empty()) {
    const auto rows = sweep_groups(cfg, kind, n_points, parse_group_list(o.sweep_groups));
    std::cout << sweep_table(rows);
    if (!o.out.empty()) {
      fs::create_directories(o.out);
      write_text_file(fs::path(o.out) / "sweep.json", sweep_json(rows) + "\n");
      write_text_file(fs::path(o.out) / "sweep.txt", sweep_table(rows));
    }
    return 0;
  }

  ComplexityReport report = model_complexity(cfg, kind, n_points);
  if (o.measure) {
    Model model = kind == ModelKind::segmenter ? build_segmenter(cfg, o.seed)
                                               : build_classifier(cfg, o.seed);
    const PointCloud cloud = synth_dataset(1, n_points, o.seed, o.segmentation)[0];
    report.timing = measure_forward_time(model, cloud, static_cast<int>(o.trials));
  }
  std::cout << report_table(report);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text_file(fs::path(o.out) / "report.json", report_json(report) + "\n");
    write_text_file(fs::path(o.out) / "report.txt", report_table(report));
  }
  return 0;
}

int cmd_gradcheck(const Opts& o) {
  constexpr double kTol = 1e-4;
  std::vector<GradCheckCase> cases = op_gradcheck_cases(o.seed);
  std::vector<GradCheckCase> composite = model_gradcheck_cases(o.seed);
  cases.insert(cases.end(), std::make_move_iterator(composite.begin()),
               std::make_move_iterator(composite.end()));
  if (o.inject_fault) cases.push_back(injected_fault_case());

  int failures = 0;
  for (const auto& c : cases) {
    try {
      const GradCheckReport r = c.run();
      const bool ok = r.max_rel_err < kTol;
      std::printf("%-4s %-28s max_rel_err=%.3e worst_coord=%lld analytic=%.8g numeric=%.8g\n",
                  ok ? "ok" : "FAIL", c.name.c_str(), r.max_rel_err,
                  static_cast<long long>(r.worst_coord), r.analytic_at_worst, r.numeric_at_worst);
      if (!ok) ++failures;
    } catch (const Error& e) {
      std::printf("FAIL %-28s error: %s\n", c.name.c_str(), e.what());
      ++failures;
    }
  }
  std::printf("gradcheck: %zu cases, %d failed (tolerance %.0e)\n", cases.size(), failures, kTol);
  return failures == 0 ? 0 : 3;
}

int cmd_bench_knn(const Opts& o) {
  const std::vector<Index> sizes = {1024, 4096, 16384};
  const Index k = static_cast<Index>(o.k ? o.k : 20);
  const int trials = std::max(1, static_cast<int>(o.trials));

  auto median_ms = [trials](auto&& fn) {
    std::vector<double> ms;
    for (int t = 0; t < trials; ++t) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    return ms[ms.size() / 2];
  };

  std::printf("%8s %4s %6s %12s %12s %9s\n", "N", "k", "agree", "brute_ms", "index_ms", "speedup");
  for (const Index n : sizes) {
    PointCloud cloud;
    cloud.data.resize(n, 3);
    auto rng = make_rng(o.seed, "bench", static_cast<std::uint64_t>(n));
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < 3; ++j) cloud.data(i, j) = dist(rng);

    const NeighborIndex brute = knn_search(cloud, k);
    const NeighborIndex indexed = knn_search_kdtree(cloud, k);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < k; ++j)
        if (brute.indices(i, j) != indexed.indices(i, j))
          throw VerificationError("bench-knn: index result disagrees with brute force at N=" +
                                  std::to_string(n) + " row=" + std::to_string(i) +
                                  " col=" + std::to_string(j));

    volatile long long sink = 0;
    const double brute_ms = median_ms([&] {
      const NeighborIndex r = knn_search(cloud, k);
      sink = sink + r.indices(0, 0);
    });
    const double index_ms = median_ms([&] {
      const NeighborIndex r = knn_search_kdtree(cloud, k);
      sink = sink + r.indices(0, 0);
    });
    (void)sink;
    std::printf("%8lld %4lld %6s %12.3f %12.3f %9.2f\n", static_cast<long long>(n),
                static_cast<long long>(k), "yes", brute_ms, index_ms,
                index_ms > 0 ? brute_ms / index_ms : 0.0);
  }
  return 0;
}

int cmd_synth(const Opts& o) {
  if (o.out.empty()) throw UsageError("synth: --out DIR is required");
  const Index pts = static_cast<Index>(o.points ? o.points : 256);
  const auto clouds =
      synth_dataset(static_cast<Index>(o.per_class), pts, o.seed, o.segmentation);
  fs::create_directories(o.out);
  const char* ext = o.format == "text" ? ".txt" : ".spnc";
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "cloud_%05zu%s", i, ext);
    save_cloud(clouds[i], (fs::path(o.out) / name).string());
  }
  std::printf("wrote %zu clouds (%lld points each) to %s\n", clouds.size(),
              static_cast<long long>(pts), o.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spn: point-cloud classification and segmentation with grouped, "
               "channel-shuffled 1x1 convolutions over k-NN edge features"};
  app.require_subcommand(1);
  Opts o;

  auto add_seed = [&o](CLI::App* s) {
    s->add_option("--seed", o.seed, "seed from which all randomness derives (default 42)");
  };
  auto add_model_flags = [&o](CLI::App* s) {
    s->add_option("--groups", o.groups, "group count for every grouped layer (0 = stage defaults)");
    s->add_option("--k", o.k, "neighbors per center for every stage (0 = stage defaults)");
    s->add_option("--edge-variant", o.edge_variant,
                  "edge features: a=(center,offset) b=(center,neighbor) c=(center,neighbor,offset)")
        ->check(CLI::IsMember({"a", "b", "c"}));
    s->add_option("--neighbor", o.neighbor, "neighborhood rule")
        ->check(CLI::IsMember({"knn", "radius"}));
    s->add_option("--radius", o.radius, "ball radius for --neighbor radius (default 0.2)");
    s->add_option("--in-channels", o.in_channels, "input channels (0 = infer from data)");
    s->add_option("--classes", o.classes, "output classes (0 = infer from labels)");
    s->add_option("--dropout", o.dropout, "head dropout rate override");
    s->add_flag("--segmentation", o.segmentation, "per-point labels / segmentation model");
  };
  auto add_data_flags = [&o](CLI::App* s) {
    s->add_flag("--synth", o.synth, "use the built-in synthetic shape dataset");
    s->add_option("--data", o.data, "cloud file or directory of .spnc/.txt clouds");
    s->add_option("--per-class", o.per_class, "synthetic clouds per class (default 200)");
    s->add_option("--points", o.points, "points per synthetic cloud (default 256)");
    s->add_option("--holdout", o.holdout, "held-out fraction when no --eval-data (default 0.2)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_seed(train_cmd);
  add_model_flags(train_cmd);
  add_data_flags(train_cmd);
  train_cmd->add_option("--eval-data", o.eval_data, "separate evaluation dataset path");
  train_cmd->add_option("--epochs", o.epochs, "training epochs (default 30)");
  train_cmd->add_option("--batch", o.batch, "mini-batch size (default 32)");
  train_cmd->add_option("--lr0", o.lr0, "initial learning rate (default 0.001)");
  train_cmd->add_flag("--no-augment", o.no_augment, "disable rotation/scale/jitter augmentation");
  train_cmd->add_option("--threads", o.threads, "evaluation threads (default 1)");
  train_cmd->add_option("--out", o.out, "output directory (default ./out)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a classifier checkpoint");
  add_seed(eval_cmd);
  add_data_flags(eval_cmd);
  eval_cmd->add_option("--model", o.model_path, "checkpoint path (.spnm)")->required();
  eval_cmd->add_option("--threads", o.threads, "evaluation threads (default 1)");
  eval_cmd->add_option("--out", o.out, "directory for metrics.json");

  CLI::App* segment_cmd =
      app.add_subcommand("segment", "evaluate a segmentation checkpoint and dump predictions");
  add_seed(segment_cmd);
  add_data_flags(segment_cmd);
  segment_cmd->add_option("--model", o.model_path, "checkpoint path (.spnm)")->required();
  segment_cmd->add_option("--threads", o.threads, "evaluation threads (default 1)");
  segment_cmd->add_option("--out", o.out, "directory for metrics.json and per-cloud predictions");

  CLI::App* complexity_cmd =
      app.add_subcommand("complexity", "analytic parameter/FLOP report for a configuration");
  add_seed(complexity_cmd);
  add_model_flags(complexity_cmd);
  complexity_cmd->add_option("--points", o.points, "input cloud size N (default 1024)");
  complexity_cmd->add_option("--sweep-groups", o.sweep_groups,
                             "comma list of group counts to compare, e.g. 1,2,4,8");
  complexity_cmd->add_flag("--measure", o.measure, "also time eval-mode forward passes");
  complexity_cmd->add_option("--trials", o.trials, "timing trials for --measure (default 3)");
  complexity_cmd->add_option("--out", o.out, "directory for report/sweep files");

  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "finite-difference checks for every differentiable op and small models");
  add_seed(gradcheck_cmd);
  gradcheck_cmd->add_flag("--inject-fault", o.inject_fault,
                          "add a deliberately wrong gradient to demonstrate failure reporting");

  CLI::App* bench_cmd = app.add_subcommand(
      "bench-knn", "compare brute-force vs k-d tree neighbor search (exact agreement enforced)");
  add_seed(bench_cmd);
  bench_cmd->add_option("--k", o.k, "neighbors per point (default 20)");
  bench_cmd->add_option("--trials", o.trials, "timing trials per method (default 3)");

  CLI::App* synth_cmd = app.add_subcommand("synth", "write the synthetic shape dataset to disk");
  add_seed(synth_cmd);
  synth_cmd->add_option("--per-class", o.per_class, "clouds per class (default 200)");
  synth_cmd->add_option("--points", o.points, "points per cloud (default 256)");
  synth_cmd->add_flag("--segmentation", o.segmentation, "per-point part labels");
  synth_cmd->add_option("--format", o.format, "cloud file format")
      ->check(CLI::IsMember({"binary", "text"}));
  synth_cmd->add_option("--out", o.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o);
    if (eval_cmd->parsed()) return cmd_eval(o, false);
    if (segment_cmd->parsed()) return cmd_eval(o, true);
    if (complexity_cmd->parsed()) return cmd_complexity(o);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(o);
    if (bench_cmd->parsed()) return cmd_bench_knn(o);
    if (synth_cmd->parsed()) return cmd_synth(o);
    throw UsageError("no command selected");
  } catch (const IoError& e) {
    log::error(e.what());
    return 2;
  } catch (const VerificationError& e) {
    log::error(e.what());
    return 3;
  } catch (const Error& e) {
    log::error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 1;
  }
}
