#include "ffsc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "ffsc/rng.hpp"

namespace ffsc::data {

int Domain::class_index(int class_id) const {
  const auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end() || *it != class_id) {
    throw StructuralError("class " + std::to_string(class_id) + " not in domain '" + name + "'");
  }
  return static_cast<int>(it - class_ids.begin());
}

std::vector<std::size_t> Domain::indices_of(int class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == class_id) out.push_back(i);
  }
  return out;
}

nn::Batch Domain::as_batch() const { return {samples, labels}; }

Domain make_domain(std::string name, Matrix samples, std::vector<int> labels) {
  if (samples.rows() == 0) throw StructuralError("domain '" + name + "' has no samples");
  if (labels.size() != samples.rows()) {
    throw StructuralError("domain '" + name + "': label count does not match sample count");
  }
  std::set<int> ids(labels.begin(), labels.end());
  Domain d;
  d.name = std::move(name);
  d.samples = std::move(samples);
  d.labels = std::move(labels);
  d.class_ids.assign(ids.begin(), ids.end());
  return d;
}

Domain subset(const Domain& domain, std::span<const std::size_t> indices, std::string name) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) labels.push_back(domain.labels.at(i));
  Domain out = make_domain(std::move(name), gather_rows(domain.samples, indices), std::move(labels));
  out.generator = domain.generator;
  out.image_shape = domain.image_shape;
  return out;
}

Domain relabel(const Domain& domain, int offset) {
  Domain out = domain;
  for (int& y : out.labels) y += offset;
  for (int& c : out.class_ids) c += offset;
  return out;
}

void check_disjoint_classes(std::span<const Domain> domains) {
  std::map<int, std::string> owner;
  for (const auto& d : domains) {
    for (int c : d.class_ids) {
      const auto [it, inserted] = owner.emplace(c, d.name);
      if (!inserted) {
        throw StructuralError("class " + std::to_string(c) + " appears in both '" + it->second +
                              "' and '" + d.name + "'");
      }
    }
  }
}

Domain with_label_noise(const Domain& domain, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw InvalidSpecError("label noise must be in [0, 1)");
  if (fraction == 0.0 || domain.num_classes() < 2) return domain;
  Domain out = domain;
  Rng rng = make_rng(seed, 0x4015e);
  std::vector<std::size_t> order(out.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto flips = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(out.size())));
  std::uniform_int_distribution<std::size_t> other(1, out.num_classes() - 1);
  for (std::size_t k = 0; k < flips; ++k) {
    int& y = out.labels[order[k]];
    const auto idx = static_cast<std::size_t>(out.class_index(y));
    y = out.class_ids[(idx + other(rng)) % out.num_classes()];
  }
  return out;
}

// ---------------------------------------------------------------------------

void validate(const SyntheticSpec& s) {
  if (s.num_domains < 1) throw InvalidSpecError("num_domains must be >= 1");
  if (s.classes_per_domain < 2) throw InvalidSpecError("classes_per_domain must be >= 2");
  if (s.samples_per_class < 1) throw InvalidSpecError("samples_per_class must be >= 1");
  if (s.dim < 1) throw InvalidSpecError("dim must be >= 1");
  if (!(s.shift >= 0.0)) throw InvalidSpecError("shift must be >= 0");
  if (!(s.sigma > 0.0)) throw InvalidSpecError("sigma must be > 0");
  if (!(s.class_spread >= 0.0)) throw InvalidSpecError("class_spread must be >= 0");
  if (!(s.label_noise >= 0.0 && s.label_noise < 1.0)) throw InvalidSpecError("label_noise must be in [0, 1)");
  if (!s.names.empty() && s.names.size() != s.num_domains) {
    throw InvalidSpecError("names must list one entry per domain");
  }
}

std::vector<Domain> gen_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  const std::size_t C = spec.classes_per_domain, d = spec.dim;
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> templ(C, std::vector<double>(d));
  {
    Rng rng = make_rng(seed, 0x7e);
    for (auto& m : templ) {
      for (double& v : m) v = spec.class_spread * unit(rng);
    }
  }

  std::vector<Domain> out;
  out.reserve(spec.num_domains);
  for (std::size_t j = 0; j < spec.num_domains; ++j) {
    Rng shift_rng = make_rng(seed, 0x5000 + j);
    GaussianMixture gm;
    gm.sigma = spec.sigma;
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> u(d);
      double norm = 0.0;
      do {
        norm = 0.0;
        for (double& v : u) {
          v = unit(shift_rng);
          norm += v * v;
        }
      } while (norm == 0.0);
      norm = std::sqrt(norm);
      std::vector<double> mean = templ[c];
      for (std::size_t k = 0; k < d; ++k) mean[k] += spec.shift * u[k] / norm;
      gm.means.push_back(std::move(mean));
    }

    Rng sample_rng = make_rng(seed, 0x6000 + j);
    Matrix x(C * spec.samples_per_class, d);
    std::vector<int> labels(x.rows());
    const int first_id = static_cast<int>(j * C);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
        const std::size_t row = c * spec.samples_per_class + s;
        labels[row] = first_id + static_cast<int>(c);
        auto r = x.row(row);
        for (std::size_t k = 0; k < d; ++k) r[k] = gm.means[c][k] + spec.sigma * unit(sample_rng);
      }
    }
    std::string name = spec.names.empty() ? "domain" + std::to_string(j) : spec.names[j];
    Domain dom = make_domain(std::move(name), std::move(x), std::move(labels));
    dom.generator = std::move(gm);
    if (spec.label_noise > 0.0) dom = with_label_noise(dom, spec.label_noise, seed + j);
    out.push_back(std::move(dom));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off) {
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

void put_be32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v >> 24));
  buf.push_back(static_cast<unsigned char>(v >> 16));
  buf.push_back(static_cast<unsigned char>(v >> 8));
  buf.push_back(static_cast<unsigned char>(v));
}

void write_file(const std::filesystem::path& p, const std::vector<unsigned char>& buf) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

}  // namespace

Domain load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                std::string name) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  if (img.size() < 4 || read_be32(img, 0) != kIdxImageMagic) {
    throw BadMagicError("'" + images.string() + "' is not an IDX image file (bad magic)");
  }
  if (lab.size() < 4 || read_be32(lab, 0) != kIdxLabelMagic) {
    throw BadMagicError("'" + labels.string() + "' is not an IDX label file (bad magic)");
  }
  if (img.size() < 16) throw TruncatedError("'" + images.string() + "': truncated header");
  if (lab.size() < 8) throw TruncatedError("'" + labels.string() + "': truncated header");

  const std::uint64_t n = read_be32(img, 4);
  const std::uint64_t rows = read_be32(img, 8);
  const std::uint64_t cols = read_be32(img, 12);
  const std::uint64_t n_labels = read_be32(lab, 4);
  if (n == 0 || rows == 0 || cols == 0) {
    throw TruncatedError("'" + images.string() + "': header declares an empty payload");
  }
  // All factors are < 2^32, so n * rows * cols cannot overflow unless huge; check stepwise.
  const std::uint64_t pixels = rows * cols;
  const std::uint64_t available = img.size() - 16;
  if (pixels > available || n > available / pixels) {
    throw TruncatedError("'" + images.string() + "': payload shorter than header declares");
  }
  if (n_labels > lab.size() - 8) {
    throw TruncatedError("'" + labels.string() + "': payload shorter than header declares");
  }
  if (n_labels != n) {
    std::ostringstream os;
    os << "image count " << n << " in '" << images.string() << "' does not match label count "
       << n_labels << " in '" << labels.string() << "'";
    throw CountMismatchError(os.str());
  }

  Matrix x(n, pixels);
  auto flat = x.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = static_cast<double>(img[16 + i]) / 255.0;
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = lab[8 + i];
  Domain d = make_domain(std::move(name), std::move(x), std::move(y));
  d.image_shape = std::array<std::size_t, 2>{rows, cols};
  return d;
}

void write_idx(const Domain& domain, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  if (!domain.image_shape) throw StateError("write_idx: domain has no image shape");
  const auto [rows, cols] = *domain.image_shape;
  if (rows * cols != domain.dim()) throw StructuralError("write_idx: image shape does not match width");
  std::vector<unsigned char> img;
  img.reserve(16 + domain.samples.size());
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(domain.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : domain.samples.flat()) {
    const double scaled = std::round(v * 255.0);
    if (!(scaled >= 0.0 && scaled <= 255.0)) throw StructuralError("write_idx: pixel outside [0, 1]");
    img.push_back(static_cast<unsigned char>(scaled));
  }
  std::vector<unsigned char> lab;
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(domain.size()));
  for (int y : domain.labels) {
    if (y < 0 || y > 255) throw StructuralError("write_idx: label outside [0, 255]");
    lab.push_back(static_cast<unsigned char>(y));
  }
  write_file(images, img);
  write_file(labels, lab);
}

// ---------------------------------------------------------------------------

void validate(const EpisodeProtocol& p) {
  if (p.min_way < 2 || p.min_way > p.max_way) throw InvalidSpecError("need 2 <= min_way <= max_way");
  if (p.min_shot < 1 || p.min_shot > p.max_shot) throw InvalidSpecError("need 1 <= min_shot <= max_shot");
  if (p.query_per_class < 1) throw InvalidSpecError("query_per_class must be >= 1");
}

Episode sample_episode(const Domain& domain, const EpisodeProtocol& protocol,
                       std::uint64_t task_index) {
  validate(protocol);
  std::vector<int> eligible;
  for (int c : domain.class_ids) {
    if (domain.indices_of(c).size() >= protocol.min_shot + protocol.query_per_class) eligible.push_back(c);
  }
  if (eligible.size() < protocol.min_way) {
    std::ostringstream os;
    os << "domain '" << domain.name << "' has " << eligible.size() << " classes with at least "
       << protocol.min_shot + protocol.query_per_class << " samples; need " << protocol.min_way;
    throw InsufficientDataError(os.str());
  }

  Rng rng = make_rng(protocol.seed, task_index);
  const std::size_t way_hi = std::min(protocol.max_way, eligible.size());
  const std::size_t way = std::uniform_int_distribution<std::size_t>(protocol.min_way, way_hi)(rng);
  std::shuffle(eligible.begin(), eligible.end(), rng);

  Episode ep;
  ep.way = way;
  ep.domain_name = domain.name;
  for (std::size_t k = 0; k < way; ++k) {
    const int c = eligible[k];
    auto idx = domain.indices_of(c);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t avail = idx.size() - protocol.query_per_class;
    const std::size_t shot = std::uniform_int_distribution<std::size_t>(
        protocol.min_shot, std::min(protocol.max_shot, avail))(rng);
    ep.classes.push_back(c);
    ep.shots.push_back(shot);
    ep.support_indices.insert(ep.support_indices.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shot));
    ep.query_indices.insert(ep.query_indices.end(), idx.begin() + static_cast<std::ptrdiff_t>(shot),
                            idx.begin() + static_cast<std::ptrdiff_t>(shot + protocol.query_per_class));
  }
  auto make_batch = [&](const std::vector<std::size_t>& rows) {
    nn::Batch b{gather_rows(domain.samples, rows), {}};
    b.labels.reserve(rows.size());
    for (auto r : rows) b.labels.push_back(domain.labels[r]);
    return b;
  };
  ep.support = make_batch(ep.support_indices);
  ep.query = make_batch(ep.query_indices);
  return ep;
}

std::pair<Domain, Domain> stratified_split(const Domain& domain, double train_fraction,
                                           std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidSpecError("train fraction must be in (0, 1)");
  }
  Rng rng = make_rng(seed, 0x5b1);
  std::vector<std::size_t> train, test;
  for (int c : domain.class_ids) {
    auto idx = domain.indices_of(c);
    if (idx.size() < 2) {
      throw InsufficientDataError("class " + std::to_string(c) + " has fewer than 2 samples");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {subset(domain, train, domain.name + "/train"), subset(domain, test, domain.name + "/test")};
}

}  // namespace ffsc::data
