#include "shufflepoint/cloud_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "shufflepoint/wire.hpp"

namespace spn {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'N', 'C'};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

PointCloud load_cloud_text(std::istream& in, const std::string& path) {
  Index channels = -1;  // -1: infer from first data row
  LabelMode mode = LabelMode::none;
  bool mode_set = false;
  std::int64_t cloud_label = 0;
  bool cloud_label_set = false;
  std::vector<double> values;
  std::vector<std::int64_t> point_labels;
  Index n_cols = -1;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      std::istringstream ds(t.substr(1));
      std::string key;
      ds >> key;
      if (key == "channels") {
        if (!(ds >> channels) || channels < 3)
          throw IoError(path + ":" + std::to_string(line_no) + ": bad '# channels' directive");
      } else if (key == "label-mode") {
        std::string v;
        ds >> v;
        if (v == "none") mode = LabelMode::none;
        else if (v == "per-cloud") mode = LabelMode::per_cloud;
        else if (v == "per-point") mode = LabelMode::per_point;
        else throw IoError(path + ":" + std::to_string(line_no) + ": unknown label mode '" + v + "'");
        mode_set = true;
      } else if (key == "label") {
        if (!(ds >> cloud_label))
          throw IoError(path + ":" + std::to_string(line_no) + ": bad '# label' directive");
        cloud_label_set = true;
      }
      continue;  // other comments ignored
    }
    std::istringstream ls(t);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof())
      throw IoError(path + ":" + std::to_string(line_no) + ": non-numeric token in point row");
    if (n_cols < 0) {
      n_cols = static_cast<Index>(row.size());
      if (channels < 0) channels = mode_set && mode == LabelMode::per_point ? n_cols - 1 : n_cols;
    } else if (static_cast<Index>(row.size()) != n_cols) {
      throw IoError(path + ":" + std::to_string(line_no) + ": inconsistent column count");
    }
    const Index expect = channels + (mode == LabelMode::per_point ? 1 : 0);
    if (n_cols != expect)
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(expect) +
                    " columns for " + std::to_string(channels) + " channels, got " + std::to_string(n_cols));
    for (Index c = 0; c < channels; ++c) values.push_back(row[static_cast<std::size_t>(c)]);
    if (mode == LabelMode::per_point) {
      const double lbl = row.back();
      if (lbl != std::floor(lbl))
        throw IoError(path + ":" + std::to_string(line_no) + ": non-integer point label");
      point_labels.push_back(static_cast<std::int64_t>(lbl));
    }
  }
  if (values.empty()) throw IoError(path + ": no points found");
  if (mode == LabelMode::per_cloud && !cloud_label_set)
    throw IoError(path + ": label-mode per-cloud without a '# label' directive");

  PointCloud cloud;
  const Index n = static_cast<Index>(values.size()) / channels;
  cloud.data = Eigen::Map<const RowMatrixXd>(values.data(), n, channels);
  cloud.label_mode = mode;
  if (mode == LabelMode::per_cloud) {
    cloud.labels.resize(1);
    cloud.labels[0] = cloud_label;
  } else if (mode == LabelMode::per_point) {
    cloud.labels = Eigen::Map<const VectorXi64>(point_labels.data(), static_cast<Index>(point_labels.size()));
  }
  try {
    cloud.validate();
  } catch (const Error& e) {
    throw IoError(path + ": " + e.what());
  }
  return cloud;
}

void save_cloud_text(const PointCloud& cloud, std::ostream& out) {
  cloud.validate();
  out << "# channels " << cloud.n_channels() << "\n";
  switch (cloud.label_mode) {
    case LabelMode::none:
      out << "# label-mode none\n";
      break;
    case LabelMode::per_cloud:
      out << "# label-mode per-cloud\n# label " << cloud.labels[0] << "\n";
      break;
    case LabelMode::per_point:
      out << "# label-mode per-point\n";
      break;
  }
  char buf[64];
  for (Index i = 0; i < cloud.n_points(); ++i) {
    for (Index c = 0; c < cloud.n_channels(); ++c) {
      // %.17g round-trips doubles exactly through the text path.
      std::snprintf(buf, sizeof buf, "%.17g", cloud.data(i, c));
      if (c) out << ' ';
      out << buf;
    }
    if (cloud.label_mode == LabelMode::per_point) out << ' ' << cloud.labels[i];
    out << '\n';
  }
}

PointCloud load_cloud_binary(std::istream& in, const std::string& path) {
  char magic[4];
  wire::get_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not a binary point-cloud file (bad magic)");
  const std::uint32_t version = wire::get_u32(in, "version");
  if (version != 1) throw IoError(path + ": unsupported point-cloud format version " + std::to_string(version));
  const std::uint32_t n = wire::get_u32(in, "point count");
  const std::uint32_t f = wire::get_u32(in, "channel count");
  const std::uint8_t mode_raw = wire::get_u8(in, "label mode");
  if (mode_raw > 2) throw IoError(path + ": invalid label mode " + std::to_string(mode_raw));
  if (n < 1 || f < 3) throw IoError(path + ": invalid dimensions N=" + std::to_string(n) + " F=" + std::to_string(f));

  PointCloud cloud;
  cloud.label_mode = static_cast<LabelMode>(mode_raw);
  cloud.data.resize(static_cast<Index>(n), static_cast<Index>(f));
  for (Index i = 0; i < cloud.data.size(); ++i) cloud.data.data()[i] = wire::get_f64(in, "point data");
  const Index n_labels = cloud.label_mode == LabelMode::none ? 0
                         : cloud.label_mode == LabelMode::per_cloud ? 1
                                                                    : static_cast<Index>(n);
  cloud.labels.resize(n_labels);
  for (Index i = 0; i < n_labels; ++i) cloud.labels[i] = wire::get_i64(in, "labels");
  try {
    cloud.validate();
  } catch (const Error& e) {
    throw IoError(path + ": " + e.what());
  }
  return cloud;
}

void save_cloud_binary(const PointCloud& cloud, std::ostream& out) {
  cloud.validate();
  wire::put_bytes(out, kMagic, 4);
  wire::put_u32(out, 1);
  wire::put_u32(out, static_cast<std::uint32_t>(cloud.n_points()));
  wire::put_u32(out, static_cast<std::uint32_t>(cloud.n_channels()));
  wire::put_u8(out, static_cast<std::uint8_t>(cloud.label_mode));
  for (Index i = 0; i < cloud.data.size(); ++i) wire::put_f64(out, cloud.data.data()[i]);
  for (Index i = 0; i < cloud.labels.size(); ++i) wire::put_i64(out, cloud.labels[i]);
}

PointCloud load_cloud(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open point-cloud file: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  const bool binary = in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0;
  in.clear();
  in.seekg(0);
  return binary ? load_cloud_binary(in, path) : load_cloud_text(in, path);
}

void save_cloud(const PointCloud& cloud, const std::string& path) {
  const bool binary = path.size() >= 5 && path.substr(path.size() - 5) == ".spnc";
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot write point-cloud file: " + path);
  if (binary) save_cloud_binary(cloud, out);
  else save_cloud_text(cloud, out);
  if (!out) throw IoError("write failed: " + path);
}

std::vector<PointCloud> load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::exists(path, ec)) throw IoError("dataset path does not exist: " + path);
  if (fs::is_regular_file(path, ec)) return {load_cloud(path)};
  if (!fs::is_directory(path, ec)) throw IoError("dataset path is neither file nor directory: " + path);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".spnc" || ext == ".txt") files.push_back(entry.path().string());
  }
  if (files.empty()) throw IoError("no .spnc or .txt cloud files in directory: " + path);
  std::sort(files.begin(), files.end());
  std::vector<PointCloud> clouds;
  clouds.reserve(files.size());
  for (const auto& f : files) clouds.push_back(load_cloud(f));
  return clouds;
}

}  // namespace spn
