#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "shufflepoint/pointcloud.hpp"

namespace spn {

// Text format: one point per line, `x y z [extras...] [label]`, `#` comments
// ignored. Directive comments pin the layout: `# channels F`,
// `# label-mode {none,per-cloud,per-point}`, `# label L` (per-cloud value).
// Without directives every column is a channel and there are no labels.
PointCloud load_cloud_text(std::istream& in, const std::string& path);
void save_cloud_text(const PointCloud& cloud, std::ostream& out);

// Binary format: magic SPNC, u32 version=1, u32 N, u32 F, u8 label mode,
// N*F little-endian f64 row-major, then labels as little-endian i64.
PointCloud load_cloud_binary(std::istream& in, const std::string& path);
void save_cloud_binary(const PointCloud& cloud, std::ostream& out);

// Sniffs the SPNC magic, otherwise parses as text.
PointCloud load_cloud(const std::string& path);
// `.spnc` extension selects the binary format, anything else text.
void save_cloud(const PointCloud& cloud, const std::string& path);

// A dataset path is either one cloud file or a directory whose .spnc/.txt
// files are loaded in sorted filename order.
std::vector<PointCloud> load_dataset(const std::string& path);

}  // namespace spn
