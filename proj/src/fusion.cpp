#include "ffsc/fusion.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iterator>
#include <random>

namespace ffsc::fusion {

namespace fs = std::filesystem;

std::string to_string(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::none: return "none";
    case FinetuneMode::vanilla: return "vanilla";
    case FinetuneMode::lora: return "lora";
  }
  return "none";
}

FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "none") return FinetuneMode::none;
  if (s == "vanilla") return FinetuneMode::vanilla;
  if (s == "lora") return FinetuneMode::lora;
  throw InvalidSpecError("unknown finetune mode '" + s + "' (expected none, vanilla or lora)");
}

void validate(const Provenance& p) {
  if (p.finetune == FinetuneMode::lora && p.rank < 1) {
    throw InvalidSpecError("lora provenance needs rank >= 1");
  }
  if (!(p.rho >= 0.0)) throw InvalidSpecError("provenance rho must be >= 0");
}

std::string utc_timestamp() {
  std::time_t t = 0;
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    long long v = 0;
    const auto [end, ec] = std::from_chars(env, env + std::strlen(env), v);
    if (ec != std::errc{} || *end != '\0' || v < 0) {
      throw InvalidSpecError(std::string("SOURCE_DATE_EPOCH is not a timestamp: ") + env);
    }
    t = static_cast<std::time_t>(v);
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Provenance make_provenance(const optim::TrainConfig& cfg, const std::string& dataset,
                           std::optional<std::string> parent, FinetuneMode mode,
                           std::size_t rank) {
  Provenance p;
  p.objective = cfg.objective;
  p.rho = cfg.objective == optim::ObjectiveKind::sam ? cfg.rho : 0.0;
  p.source_dataset = dataset;
  p.parent = std::move(parent);
  p.finetune = mode;
  p.rank = mode == FinetuneMode::lora ? rank : 0;
  p.config_hash = config_hash(cfg);
  p.created = utc_timestamp();
  validate(p);
  return p;
}

void to_json(Json& j, const Provenance& p) {
  j = Json{{"objective", optim::to_string(p.objective)},
           {"rho", p.rho},
           {"source_dataset", p.source_dataset},
           {"parent", p.parent ? Json(*p.parent) : Json(nullptr)},
           {"finetune", to_string(p.finetune)},
           {"rank", p.rank},
           {"config_hash", p.config_hash},
           {"created", p.created}};
}

void from_json(const Json& j, Provenance& p) {
  p.objective = optim::objective_from_string(j.at("objective").get<std::string>());
  p.rho = j.at("rho").get<double>();
  p.source_dataset = j.at("source_dataset").get<std::string>();
  if (j.contains("parent") && !j.at("parent").is_null()) {
    p.parent = j.at("parent").get<std::string>();
  } else {
    p.parent.reset();
  }
  p.finetune = finetune_mode_from_string(j.at("finetune").get<std::string>());
  p.rank = j.at("rank").get<std::size_t>();
  p.config_hash = j.value("config_hash", std::string{});
  p.created = j.value("created", std::string{});
}

nn::Model with_fresh_head(const nn::Model& base, std::size_t classes, std::uint64_t seed) {
  if (classes < 2) throw StructuralError("a classification head needs at least two classes");
  std::vector<std::size_t> dims = base.layer_dims();
  dims.back() = classes;
  nn::Model out = nn::Model::initialized(dims, base.activation(), seed);
  const auto src = base.parameters();
  std::copy_n(src.begin(), base.backbone_parameter_count(), out.parameters().begin());
  return out;
}

nn::Model finetune(const nn::Model& base, const data::Domain& dataset,
                   const optim::TrainConfig& cfg, FinetuneMode mode, std::size_t rank) {
  if (mode == FinetuneMode::none) throw InvalidSpecError("finetune needs mode vanilla or lora");
  if (base.has_adapters()) throw StateError("finetune expects a plain backbone without adapters");
  if (dataset.dim() != base.input_dim()) {
    throw StructuralError("data set dimension " + std::to_string(dataset.dim()) +
                          " does not match backbone input " + std::to_string(base.input_dim()));
  }
  nn::Model start = with_fresh_head(base, dataset.num_classes(), cfg.seed ^ 0x4eadULL);
  optim::TrainOptions options;
  if (mode == FinetuneMode::lora) {
    start = nn::set_gates(nn::attach_adapters(start, {nn::AdapterKind::low_rank, rank}, cfg.seed), true);
    options.trainable.assign(start.parameter_count(), true);
    std::fill_n(options.trainable.begin(), start.backbone_parameter_count(), false);
  }
  return optim::train(start, dataset, cfg, options).model;
}

nn::Model merge_lora(const nn::Model& model) {
  bool low_rank = false;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto& a = model.adapter(l);
    if (a && a->kind != nn::AdapterKind::low_rank) throw StateError("merge_lora: adapters are not low-rank");
    low_rank = low_rank || a.has_value();
  }
  if (!low_rank) throw StateError("merge_lora: model has no low-rank adapters");

  nn::Model out = nn::detach_adapters(model);
  if (!model.gates_on()) return out;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    if (!model.adapter(l)) continue;
    const std::size_t r = model.adapter(l)->rank, in = model.in_dim(l), rows = model.out_dim(l);
    const auto b = model.adapter_first(l);
    const auto a = model.adapter_second(l);
    auto w = out.weights(l);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < in; ++j) {
        double delta = 0.0;
        for (std::size_t k = 0; k < r; ++k) delta += b[i * r + k] * a[k * in + j];
        w[i * in + j] += delta;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos, const std::string& origin, const char* what) {
  if (bytes.size() - pos < sizeof(T)) {
    throw CorruptCheckpointError(origin + ": truncated while reading " + what);
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return v;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

fs::path temp_path(const fs::path& dir, const std::string& stem) {
  static thread_local std::mt19937_64 gen{std::random_device{}()};
  return dir / ("." + stem + "." + hex64(gen()) + ".tmp");
}

}  // namespace

std::string encode_checkpoint(const nn::Model& model, const Provenance& provenance) {
  validate(provenance);
  const std::string meta =
      Json{{"architecture", architecture_json(model)}, {"provenance", provenance}}.dump();
  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  put_le<std::uint64_t>(out, model.parameter_count());
  for (double p : model.parameters()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, kCheckpointMagic)) {
    throw CorruptCheckpointError(origin + ": bad magic");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos, origin, "version");
  if (version != kCheckpointVersion) {
    throw CorruptCheckpointError(origin + ": unsupported version " + std::to_string(version));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, pos, origin, "metadata length");
  if (meta_len > bytes.size() - pos) throw CorruptCheckpointError(origin + ": truncated metadata");
  Checkpoint ck;
  try {
    const Json meta = Json::parse(bytes.substr(pos, meta_len));
    ck.model = model_from_architecture(meta.at("architecture"));
    ck.provenance = meta.at("provenance").get<Provenance>();
    validate(ck.provenance);
  } catch (const Json::exception& e) {
    throw CorruptCheckpointError(origin + ": bad metadata: " + e.what());
  } catch (const CorruptCheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CorruptCheckpointError(origin + ": bad metadata: " + e.what());
  }
  pos += meta_len;
  const auto count = get_le<std::uint64_t>(bytes, pos, origin, "parameter count");
  if (count != ck.model.parameter_count()) {
    throw CorruptCheckpointError(origin + ": parameter count " + std::to_string(count) +
                                 " does not match architecture (" +
                                 std::to_string(ck.model.parameter_count()) + ")");
  }
  if ((bytes.size() - pos) / 4 < count) throw CorruptCheckpointError(origin + ": truncated payload");
  if (bytes.size() - pos != count * 4) throw CorruptCheckpointError(origin + ": trailing bytes after payload");
  for (double& p : ck.model.parameters()) {
    p = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, origin, "payload")));
  }
  return ck;
}

void write_checkpoint(const fs::path& path, const nn::Model& model, const Provenance& provenance) {
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  const fs::path tmp = temp_path(dir, path.filename().string());
  write_file(tmp, encode_checkpoint(model, provenance));
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  return decode_checkpoint(slurp(path), path.string());
}

// ---------------------------------------------------------------------------

void validate_entry_name(const std::string& name) {
  const bool ok = !name.empty() && name.front() != '.' &&
                  std::all_of(name.begin(), name.end(), [](char c) {
                    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
                  });
  if (!ok) throw InvalidSpecError("invalid bank entry name '" + name + "'");
}

BackboneBank::BackboneBank(fs::path directory) : dir_(std::move(directory)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec || !fs::is_directory(dir_)) throw IoError("cannot use '" + dir_.string() + "' as a bank directory");
}

fs::path BackboneBank::sidecar(const std::string& name) const {
  validate_entry_name(name);
  return dir_ / (name + ".json");
}

bool BackboneBank::contains(const std::string& name) const { return fs::exists(sidecar(name)); }

void BackboneBank::put(const std::string& name, const nn::Model& model, const Provenance& provenance,
                       const PutOptions& options) {
  const fs::path side = sidecar(name);
  std::optional<BankEntry> previous;
  if (fs::exists(side)) {
    if (!options.overwrite) throw DuplicateEntryError("bank already has an entry named '" + name + "'");
    previous = entry(name);
  }
  const std::string bytes = encode_checkpoint(model, provenance);
  const std::string file = name + "." + hex64(fnv1a(bytes)).substr(0, 12) + ".ffsc";
  const bool reused = previous && previous->checkpoint.filename() == file;

  const fs::path ck_tmp = temp_path(dir_, name);
  const fs::path side_tmp = temp_path(dir_, name);
  const Json meta{{"name", name},
                  {"checkpoint", file},
                  {"provenance", provenance},
                  {"architecture", architecture_json(model)}};
  try {
    write_file(ck_tmp, bytes);
    fs::rename(ck_tmp, dir_ / file);
    write_file(side_tmp, meta.dump(2) + "\n");
    if (options.before_rename) options.before_rename();
    fs::rename(side_tmp, side);
  } catch (...) {
    std::error_code ec;
    fs::remove(ck_tmp, ec);
    fs::remove(side_tmp, ec);
    if (!reused) fs::remove(dir_ / file, ec);
    throw;
  }
  if (previous && !reused) {
    std::error_code ec;
    fs::remove(previous->checkpoint, ec);
  }
}

BankEntry BackboneBank::entry(const std::string& name) const {
  const fs::path side = sidecar(name);
  if (!fs::exists(side)) throw MissingEntryError("no bank entry named '" + name + "'");
  Json j;
  try {
    j = Json::parse(slurp(side));
    BankEntry e;
    e.name = j.at("name").get<std::string>();
    e.checkpoint = dir_ / j.at("checkpoint").get<std::string>();
    e.provenance = j.at("provenance").get<Provenance>();
    e.architecture = j.at("architecture");
    return e;
  } catch (const Json::exception& ex) {
    throw CorruptCheckpointError("sidecar '" + side.string() + "' is malformed: " + ex.what());
  }
}

Checkpoint BackboneBank::get(const std::string& name) const {
  const BankEntry e = entry(name);
  if (!fs::exists(e.checkpoint)) {
    throw CorruptCheckpointError("checkpoint '" + e.checkpoint.string() + "' of entry '" + name + "' is missing");
  }
  return read_checkpoint(e.checkpoint);
}

std::vector<BankEntry> BackboneBank::list() const {
  std::vector<std::string> names;
  for (const auto& de : fs::directory_iterator(dir_)) {
    const fs::path& p = de.path();
    if (!de.is_regular_file() || p.extension() != ".json") continue;
    const std::string stem = p.stem().string();
    if (stem.empty() || stem.front() == '.') continue;
    names.push_back(stem);
  }
  std::sort(names.begin(), names.end());
  std::vector<BankEntry> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(entry(n));
  return out;
}

}  // namespace ffsc::fusion
