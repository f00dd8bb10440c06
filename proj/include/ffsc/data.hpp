#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ffsc/matrix.hpp"
#include "ffsc/nn.hpp"

namespace ffsc::data {

/// Equal-weight isotropic Gaussian mixture that generated a synthetic domain.
struct GaussianMixture {
  std::vector<std::vector<double>> means;  // one per class, in class_ids order
  double sigma = 1.0;

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
  bool operator==(const GaussianMixture&) const = default;
};

struct Domain {
  std::string name;
  Matrix samples;            // N x d
  std::vector<int> labels;   // class IDs, one per row
  std::vector<int> class_ids;  // sorted, unique
  std::optional<GaussianMixture> generator;
  std::optional<std::array<std::size_t, 2>> image_shape;  // rows, cols for IDX data

  std::size_t size() const { return samples.rows(); }
  std::size_t dim() const { return samples.cols(); }
  std::size_t num_classes() const { return class_ids.size(); }
  /// Position of `class_id` in class_ids; throws StructuralError if absent.
  int class_index(int class_id) const;
  /// Row indices with the given label, ascending.
  std::vector<std::size_t> indices_of(int class_id) const;
  /// All rows as a batch; labels are class IDs.
  nn::Batch as_batch() const;
};

/// Validates invariants (N >= 1, row/label counts) and derives class_ids.
Domain make_domain(std::string name, Matrix samples, std::vector<int> labels);

/// Rows at `indices` with their labels; class_ids recomputed, generator kept.
Domain subset(const Domain& domain, std::span<const std::size_t> indices, std::string name);

/// Shifts every class ID by `offset`.
Domain relabel(const Domain& domain, int offset);

/// Throws StructuralError if two domains share a class ID.
void check_disjoint_classes(std::span<const Domain> domains);

/// Replaces a `fraction` of labels by a different class of the same domain.
/// The generator (true class densities) is left untouched.
Domain with_label_noise(const Domain& domain, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic domains

/// Domain j, class c has mean  template_c + shift * u_{j,c}  where template_c
/// ~ N(0, class_spread^2 I) is shared by all domains and u_{j,c} is a random
/// unit vector. Samples are N(mean, sigma^2 I). Domain j owns class IDs
/// [j * classes_per_domain, (j + 1) * classes_per_domain).
struct SyntheticSpec {
  std::size_t num_domains = 2;
  std::size_t classes_per_domain = 5;
  std::size_t samples_per_class = 40;
  std::size_t dim = 16;
  double shift = 1.0;
  double sigma = 1.0;
  double class_spread = 2.0;
  double label_noise = 0.0;
  std::vector<std::string> names;  // optional; default "domain<j>"
};

void validate(const SyntheticSpec& spec);
std::vector<Domain> gen_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// IDX files (big-endian, unsigned byte payloads)

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Pixels scaled to [0, 1]; labels become class IDs unchanged.
Domain load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                std::string name = "idx");
/// Inverse of load_idx for domains with an image_shape and integer pixels.
void write_idx(const Domain& domain, const std::filesystem::path& images,
               const std::filesystem::path& labels);

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeProtocol {
  std::size_t min_way = 2;
  std::size_t max_way = 5;
  std::size_t min_shot = 1;
  std::size_t max_shot = 5;
  std::size_t query_per_class = 5;
  std::uint64_t seed = 0;
};

void validate(const EpisodeProtocol& protocol);

/// Support and query labels are class IDs.
struct Episode {
  nn::Batch support;
  nn::Batch query;
  std::size_t way = 0;
  std::vector<int> classes;         // chosen classes, in sampling order
  std::vector<std::size_t> shots;   // per chosen class
  std::vector<std::size_t> support_indices;  // rows of the source domain
  std::vector<std::size_t> query_indices;
  std::string domain_name;
};

/// Depends only on (protocol.seed, task_index).
Episode sample_episode(const Domain& domain, const EpisodeProtocol& protocol,
                       std::uint64_t task_index);

/// Per-class split; each class keeps at least one sample on each side.
std::pair<Domain, Domain> stratified_split(const Domain& domain, double train_fraction,
                                           std::uint64_t seed);

}  // namespace ffsc::data
