#include "shufflepoint/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "shufflepoint/wire.hpp"

namespace spn {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'N', 'M'};
using json = nlohmann::json;  // std::map-backed: object keys serialize sorted

std::string variant_name(EdgeFeatureVariant v) {
  switch (v) {
    case EdgeFeatureVariant::CenterRelative: return "a";
    case EdgeFeatureVariant::CenterNeighbor: return "b";
    case EdgeFeatureVariant::CenterNeighborRelative: return "c";
  }
  throw ConfigError("unknown edge feature variant");
}

EdgeFeatureVariant variant_from_name(const std::string& s) {
  if (s == "a") return EdgeFeatureVariant::CenterRelative;
  if (s == "b") return EdgeFeatureVariant::CenterNeighbor;
  if (s == "c") return EdgeFeatureVariant::CenterNeighborRelative;
  throw ConfigError("unknown edge feature variant '" + s + "'");
}

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void write_record(std::ostream& out, const std::string& name, const Shape& shape, const double* data,
                  Index count) {
  wire::put_u32(out, static_cast<std::uint32_t>(name.size()));
  wire::put_bytes(out, name.data(), name.size());
  wire::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) wire::put_u32(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < count; ++i) wire::put_f64(out, data[i]);
}

bool read_record(std::istream& in, const std::string& path, TensorRecord* rec) {
  // Records run to end of file; a clean EOF before the next name terminates.
  std::uint8_t probe;
  in.read(reinterpret_cast<char*>(&probe), 1);
  if (in.gcount() == 0) return false;
  std::uint8_t rest[3];
  wire::get_bytes(in, rest, 3, "record name length");
  std::uint32_t name_len = probe;
  for (int i = 0; i < 3; ++i) name_len |= static_cast<std::uint32_t>(rest[i]) << (8 * (i + 1));
  if (name_len == 0 || name_len > 4096) throw IoError(path + ": implausible tensor name length");
  rec->name.resize(name_len);
  wire::get_bytes(in, rec->name.data(), name_len, "record name");
  const std::uint32_t rank = wire::get_u32(in, "record rank");
  if (rank > 4) throw IoError(path + ": tensor rank " + std::to_string(rank) + " exceeds 4");
  rec->shape.clear();
  Index count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = wire::get_u32(in, "record dims");
    rec->shape.push_back(static_cast<Index>(d));
    count *= static_cast<Index>(d);
  }
  rec->values.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) rec->values[static_cast<std::size_t>(i)] = wire::get_f64(in, "record payload");
  return true;
}

}  // namespace

std::string model_config_json(const Model& model) {
  json stages = json::array();
  for (const auto& sc : model.cfg.stages) {
    json s;
    s["n_out"] = sc.n_out;
    s["k"] = sc.k;
    s["groups"] = sc.sgc.g;
    s["widths"] = sc.sgc.mlp_widths;
    s["edge_variant"] = variant_name(sc.sgc.edge_variant);
    stages.push_back(std::move(s));
  }
  json j;
  j["kind"] = model.kind == ModelKind::classifier ? "classifier" : "segmenter";
  j["stages"] = std::move(stages);
  j["head_widths"] = model.cfg.head_widths;
  j["seg_up_widths"] = model.cfg.seg_up_widths;
  j["n_classes"] = model.cfg.n_classes;
  j["dropout_rate"] = model.cfg.dropout_rate;
  j["in_channels"] = model.cfg.in_channels;
  j["neighbor"] = model.cfg.neighbor == NeighborMethod::knn ? "knn" : "radius";
  j["radius"] = model.cfg.radius;
  return j.dump();
}

Model model_from_config_json(const std::string& json_text, std::uint64_t init_seed) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("malformed checkpoint config JSON: ") + e.what());
  }
  try {
    ModelConfig cfg;
    for (const auto& s : j.at("stages")) {
      StageConfig sc;
      sc.n_out = s.at("n_out").get<Index>();
      sc.k = s.at("k").get<Index>();
      sc.sgc.g = s.at("groups").get<Index>();
      sc.sgc.mlp_widths = s.at("widths").get<std::vector<Index>>();
      sc.sgc.edge_variant = variant_from_name(s.at("edge_variant").get<std::string>());
      sc.sgc.k = sc.k;
      cfg.stages.push_back(std::move(sc));
    }
    cfg.head_widths = j.at("head_widths").get<std::vector<Index>>();
    cfg.seg_up_widths = j.at("seg_up_widths").get<std::vector<Index>>();
    cfg.n_classes = j.at("n_classes").get<Index>();
    cfg.dropout_rate = j.at("dropout_rate").get<double>();
    cfg.in_channels = j.at("in_channels").get<Index>();
    cfg.neighbor = j.at("neighbor").get<std::string>() == "radius" ? NeighborMethod::radius
                                                                   : NeighborMethod::knn;
    cfg.radius = j.at("radius").get<double>();
    const std::string kind = j.at("kind").get<std::string>();
    return kind == "segmenter" ? build_segmenter(cfg, init_seed) : build_classifier(cfg, init_seed);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint config missing fields: ") + e.what());
  }
}

void save_model(Model& model, std::ostream& out) {
  wire::put_bytes(out, kMagic, 4);
  wire::put_u32(out, 1);
  const std::string cfg = model_config_json(model);
  wire::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  wire::put_bytes(out, cfg.data(), cfg.size());
  for (const auto& p : model.parameters())
    write_record(out, p.name, p.tensor->shape, p.tensor->values.data(), p.tensor->size());
  for (const auto& b : model.bn_buffers()) {
    write_record(out, b.name + ".running_mean", {b.stats->running_mean.size()},
                 b.stats->running_mean.data(), b.stats->running_mean.size());
    write_record(out, b.name + ".running_var", {b.stats->running_var.size()},
                 b.stats->running_var.data(), b.stats->running_var.size());
  }
}

void save_model(Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  save_model(model, out);
  if (!out) throw IoError("checkpoint write failed: " + path);
}

Model load_model(std::istream& in, const std::string& path) {
  char magic[4];
  wire::get_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not a model checkpoint (bad magic)");
  const std::uint32_t version = wire::get_u32(in, "version");
  if (version != 1) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t cfg_len = wire::get_u32(in, "config length");
  std::string cfg(cfg_len, '\0');
  wire::get_bytes(in, cfg.data(), cfg_len, "config");
  Model model = model_from_config_json(cfg);

  std::map<std::string, TensorRecord> records;
  TensorRecord rec;
  while (read_record(in, path, &rec)) records[rec.name] = std::move(rec);

  auto take = [&records, &path](const std::string& name, const Shape& want) -> TensorRecord {
    auto it = records.find(name);
    if (it == records.end()) throw IoError(path + ": checkpoint is missing tensor '" + name + "'");
    TensorRecord r = std::move(it->second);
    records.erase(it);
    if (r.shape != want)
      throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(r.shape) + ", expected " +
                    shape_str(want));
    return r;
  };
  for (auto& p : model.parameters()) {
    TensorRecord r = take(p.name, p.tensor->shape);
    p.tensor->values = Eigen::Map<const ArrayX<double>>(r.values.data(), static_cast<Index>(r.values.size()));
  }
  for (auto& b : model.bn_buffers()) {
    TensorRecord rm = take(b.name + ".running_mean", {b.stats->running_mean.size()});
    b.stats->running_mean =
        Eigen::Map<const ArrayX<double>>(rm.values.data(), static_cast<Index>(rm.values.size()));
    TensorRecord rv = take(b.name + ".running_var", {b.stats->running_var.size()});
    b.stats->running_var =
        Eigen::Map<const ArrayX<double>>(rv.values.data(), static_cast<Index>(rv.values.size()));
  }
  if (!records.empty())
    throw IoError(path + ": checkpoint has unexpected tensor '" + records.begin()->first + "'");
  return model;
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return load_model(in, path);
}

}  // namespace spn
