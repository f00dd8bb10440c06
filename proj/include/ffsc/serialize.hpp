#pragma once

// JSON round-tripping for configuration and report types. Unknown keys are
// ignored on input and missing keys keep their defaults, so partial config
// files are accepted.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>
#include <string_view>

#include "json.hpp"

#include "ffsc/data.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/optim.hpp"

namespace ffsc {

using Json = nlohmann::json;

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Stable hash of a training configuration (of its canonical JSON form).
std::string config_hash(const optim::TrainConfig& cfg);

/// Architecture description: layer dims, activation, adapters, gate state.
Json architecture_json(const nn::Model& model);
/// Zero-parameter model with the described architecture.
nn::Model model_from_architecture(const Json& j);

namespace optim {
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);
}  // namespace optim

namespace data {
void to_json(Json& j, const SyntheticSpec& s);
void from_json(const Json& j, SyntheticSpec& s);
void to_json(Json& j, const EpisodeProtocol& p);
void from_json(const Json& j, EpisodeProtocol& p);
void to_json(Json& j, const GaussianMixture& g);
void from_json(const Json& j, GaussianMixture& g);
/// Samples are stored row by row; the generator and image shape when known.
void to_json(Json& j, const Domain& d);
void from_json(const Json& j, Domain& d);
}  // namespace data

/// Dataset file: {"domains": [...], "meta": {...}}. Domain names must be
/// unique.
void save_dataset(const std::filesystem::path& path, std::span<const data::Domain> domains,
                  const Json& meta = Json::object());
std::vector<data::Domain> load_dataset(const std::filesystem::path& path);

namespace nn {
void to_json(Json& j, const AdapterSpec& s);
void from_json(const Json& j, AdapterSpec& s);
}  // namespace nn

/// Reads a JSON file; IoError when unreadable or malformed.
Json read_json_file(const std::string& path);

/// Writes text to `path` through a temporary file and a rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace ffsc
