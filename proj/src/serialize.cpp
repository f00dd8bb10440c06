#include "ffsc/serialize.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "ffsc/error.hpp"

namespace ffsc {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_hash(const optim::TrainConfig& cfg) {
  return hex64(fnv1a(Json(cfg).dump()));
}

Json architecture_json(const nn::Model& model) {
  Json j;
  j["layer_dims"] = model.layer_dims();
  j["activation"] = nn::to_string(model.activation());
  j["adapter"] = nullptr;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    if (model.adapter(l)) {
      j["adapter"] = *model.adapter(l);
      break;
    }
  }
  j["gates_on"] = model.gates_on();
  j["parameter_count"] = model.parameter_count();
  return j;
}

nn::Model model_from_architecture(const Json& j) {
  try {
    nn::Model m(j.at("layer_dims").get<std::vector<std::size_t>>(),
                nn::activation_from_string(j.at("activation").get<std::string>()));
    if (j.contains("adapter") && !j.at("adapter").is_null()) {
      m = nn::attach_adapters(m, j.at("adapter").get<nn::AdapterSpec>());
      if (j.value("gates_on", false)) m = nn::set_gates(m, true);
    }
    if (j.contains("parameter_count") &&
        j.at("parameter_count").get<std::size_t>() != m.parameter_count()) {
      throw StructuralError("architecture parameter_count does not match layer dims");
    }
    return m;
  } catch (const Json::exception& e) {
    throw InvalidSpecError(std::string("malformed architecture: ") + e.what());
  }
}

namespace optim {

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"min_lr", c.min_lr},
           {"total_iterations", c.total_iterations},
           {"restart_period", c.restart_period},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"rho", c.rho},
           {"objective", to_string(c.objective)},
           {"seed", c.seed}};
}

void from_json(const Json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.total_iterations = j.value("total_iterations", c.total_iterations);
  c.restart_period = j.value("restart_period", c.restart_period);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.rho = j.value("rho", c.rho);
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
  c.seed = j.value("seed", c.seed);
}

}  // namespace optim

namespace data {

void to_json(Json& j, const SyntheticSpec& s) {
  j = Json{{"num_domains", s.num_domains},
           {"classes_per_domain", s.classes_per_domain},
           {"samples_per_class", s.samples_per_class},
           {"dim", s.dim},
           {"shift", s.shift},
           {"sigma", s.sigma},
           {"class_spread", s.class_spread},
           {"label_noise", s.label_noise},
           {"names", s.names}};
}

void from_json(const Json& j, SyntheticSpec& s) {
  s.num_domains = j.value("num_domains", s.num_domains);
  s.classes_per_domain = j.value("classes_per_domain", s.classes_per_domain);
  s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
  s.dim = j.value("dim", s.dim);
  s.shift = j.value("shift", s.shift);
  s.sigma = j.value("sigma", s.sigma);
  s.class_spread = j.value("class_spread", s.class_spread);
  s.label_noise = j.value("label_noise", s.label_noise);
  s.names = j.value("names", s.names);
}

void to_json(Json& j, const EpisodeProtocol& p) {
  j = Json{{"min_way", p.min_way},   {"max_way", p.max_way},
           {"min_shot", p.min_shot}, {"max_shot", p.max_shot},
           {"query_per_class", p.query_per_class}, {"seed", p.seed}};
}

void from_json(const Json& j, EpisodeProtocol& p) {
  p.min_way = j.value("min_way", p.min_way);
  p.max_way = j.value("max_way", p.max_way);
  p.min_shot = j.value("min_shot", p.min_shot);
  p.max_shot = j.value("max_shot", p.max_shot);
  p.query_per_class = j.value("query_per_class", p.query_per_class);
  p.seed = j.value("seed", p.seed);
}

void to_json(Json& j, const GaussianMixture& g) { j = Json{{"means", g.means}, {"sigma", g.sigma}}; }

void from_json(const Json& j, GaussianMixture& g) {
  j.at("means").get_to(g.means);
  j.at("sigma").get_to(g.sigma);
}

void to_json(Json& j, const Domain& d) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = d.samples.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  j = Json{{"name", d.name}, {"samples", std::move(rows)}, {"labels", d.labels}};
  j["generator"] = d.generator ? Json(*d.generator) : Json(nullptr);
  j["image_shape"] = d.image_shape ? Json(*d.image_shape) : Json(nullptr);
}

void from_json(const Json& j, Domain& d) {
  const auto rows = j.at("samples").get<std::vector<std::vector<double>>>();
  const std::size_t dim = rows.empty() ? 0 : rows.front().size();
  Matrix x(rows.size(), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw StructuralError("domain rows have different lengths");
    std::copy(rows[i].begin(), rows[i].end(), x.row(i).begin());
  }
  d = make_domain(j.at("name").get<std::string>(), std::move(x), j.at("labels").get<std::vector<int>>());
  if (j.contains("generator") && !j.at("generator").is_null()) d.generator = j.at("generator").get<GaussianMixture>();
  if (j.contains("image_shape") && !j.at("image_shape").is_null()) {
    d.image_shape = j.at("image_shape").get<std::array<std::size_t, 2>>();
  }
}

}  // namespace data

void save_dataset(const std::filesystem::path& path, std::span<const data::Domain> domains, const Json& meta) {
  std::set<std::string> names;
  Json list = Json::array();
  for (const auto& d : domains) {
    if (!names.insert(d.name).second) throw InvalidSpecError("duplicate domain name '" + d.name + "'");
    list.push_back(d);
  }
  write_text_file(path, Json{{"domains", std::move(list)}, {"meta", meta}}.dump() + "\n");
}

std::vector<data::Domain> load_dataset(const std::filesystem::path& path) {
  const Json j = read_json_file(path.string());
  try {
    auto domains = j.at("domains").get<std::vector<data::Domain>>();
    std::set<std::string> names;
    for (const auto& d : domains) {
      if (!names.insert(d.name).second) throw InvalidSpecError("duplicate domain name '" + d.name + "'");
    }
    return domains;
  } catch (const Json::exception& e) {
    throw IoError("'" + path.string() + "' is not a dataset file: " + e.what());
  }
}

namespace nn {

void to_json(Json& j, const AdapterSpec& s) {
  j = Json{{"kind", to_string(s.kind)}, {"rank", s.rank}};
}

void from_json(const Json& j, AdapterSpec& s) {
  s.kind = adapter_kind_from_string(j.at("kind").get<std::string>());
  s.rank = j.value("rank", s.rank);
}

}  // namespace nn

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("failed writing '" + path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot write '" + path.string() + "': " + ec.message());
  }
}

}  // namespace ffsc
