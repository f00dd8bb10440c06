#pragma once

// Fine-tuning a trained backbone on another data set, and the on-disk bank of
// backbones that selection draws from.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ffsc/data.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/optim.hpp"
#include "ffsc/serialize.hpp"

namespace ffsc::fusion {

enum class FinetuneMode { none, vanilla, lora };

std::string to_string(FinetuneMode m);
FinetuneMode finetune_mode_from_string(const std::string& s);

struct Provenance {
  optim::ObjectiveKind objective = optim::ObjectiveKind::erm;
  double rho = 0.0;
  std::string source_dataset;
  std::optional<std::string> parent;
  FinetuneMode finetune = FinetuneMode::none;
  std::size_t rank = 0;
  std::string config_hash;
  std::string created;  // ISO-8601 UTC

  bool operator==(const Provenance&) const = default;
};

void validate(const Provenance& p);

/// Provenance of a model trained with `cfg` on `dataset`; the timestamp is
/// SOURCE_DATE_EPOCH when that variable is set, the current time otherwise.
Provenance make_provenance(const optim::TrainConfig& cfg, const std::string& dataset,
                           std::optional<std::string> parent = std::nullopt,
                           FinetuneMode mode = FinetuneMode::none, std::size_t rank = 0);

std::string utc_timestamp();

void to_json(Json& j, const Provenance& p);
void from_json(const Json& j, Provenance& p);

/// Same backbone (layers 0..L-2) with a freshly initialized linear head of
/// `classes` outputs. Adapters are dropped.
nn::Model with_fresh_head(const nn::Model& base, std::size_t classes, std::uint64_t seed);

/// vanilla: every parameter trains, starting from `base` with a fresh head.
/// lora: low-rank adapters of the given rank are attached with gates on and
/// only they and the head train; the result keeps the factors.
nn::Model finetune(const nn::Model& base, const data::Domain& dataset,
                   const optim::TrainConfig& cfg, FinetuneMode mode, std::size_t rank = 0);

/// Folds B A into W for every adapted layer. With gates off the adapters
/// contribute nothing and are simply dropped.
nn::Model merge_lora(const nn::Model& model);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'F', 'F', 'S', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nn::Model model;
  Provenance provenance;
};

/// Serialized container bytes; parameters are stored as f32.
std::string encode_checkpoint(const nn::Model& model, const Provenance& provenance);
/// Throws CorruptCheckpointError on any structural inconsistency.
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "checkpoint");

void write_checkpoint(const std::filesystem::path& path, const nn::Model& model,
                      const Provenance& provenance);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Backbone bank

struct BankEntry {
  std::string name;
  std::filesystem::path checkpoint;
  Provenance provenance;
  Json architecture;
};

struct PutOptions {
  bool overwrite = false;
  /// Called after all new files are on disk and before the entry is
  /// committed. Throwing from it simulates a crash at that point.
  std::function<void()> before_rename;
};

/// Each entry is a checkpoint file plus a JSON sidecar `<name>.json` that
/// names it. Renaming the sidecar into place commits an entry, so readers see
/// either the old or the new version.
class BackboneBank {
 public:
  /// Creates the directory when absent.
  explicit BackboneBank(std::filesystem::path directory);

  const std::filesystem::path& directory() const { return dir_; }

  void put(const std::string& name, const nn::Model& model, const Provenance& provenance,
           const PutOptions& options = {});
  Checkpoint get(const std::string& name) const;
  bool contains(const std::string& name) const;
  /// Sorted by name.
  std::vector<BankEntry> list() const;
  BankEntry entry(const std::string& name) const;

 private:
  std::filesystem::path sidecar(const std::string& name) const;

  std::filesystem::path dir_;
};

/// Names become file names: letters, digits, '_', '-', '.'; not starting
/// with '.'.
void validate_entry_name(const std::string& name);

}  // namespace ffsc::fusion
