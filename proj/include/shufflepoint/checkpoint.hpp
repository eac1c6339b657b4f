#pragma once

#include <iosfwd>
#include <string>

#include "shufflepoint/model.hpp"

namespace spn {

// Checkpoint format: magic SPNM, u32 version=1, u32 config byte count +
// canonical key-sorted JSON config, then per-tensor records (u32 name length,
// name bytes, u32 rank, u32 dims..., little-endian f64 payload). Records
// cover every trainable parameter plus batch-norm running buffers, in the
// model's fixed enumeration order.
void save_model(Model& model, const std::string& path);
void save_model(Model& model, std::ostream& out);

Model load_model(const std::string& path);
Model load_model(std::istream& in, const std::string& path);

// Config <-> canonical JSON text (key-sorted, no whitespace).
std::string model_config_json(const Model& model);
Model model_from_config_json(const std::string& json_text, std::uint64_t init_seed = 0);

}  // namespace spn
