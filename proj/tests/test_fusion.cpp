#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "ffsc/eval.hpp"
#include "ffsc/fusion.hpp"
#include "test_util.hpp"

using namespace ffsc;
using namespace ffsc::fusion;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("ffsc_test_fusion_" + tag);
  fs::remove_all(p);
  return p;
}

Provenance sample_provenance() {
  optim::TrainConfig cfg;
  Provenance p = make_provenance(cfg, "domain0");
  p.created = "2020-01-01T00:00:00Z";
  return p;
}

data::Domain tiny_domain(std::size_t dim, std::size_t classes, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.num_domains = 1;
  spec.classes_per_domain = classes;
  spec.samples_per_class = 12;
  spec.dim = dim;
  return data::gen_synthetic_domains(spec, seed).front();
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.flat().size(); ++i) m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

}  // namespace

TEST_CASE("merge_lora") {
  SUBCASE("rank-1 hand example") {
    nn::Model m({2, 2, 2}, nn::Activation::identity);
    m.weights(0)[0] = 1.0;
    m.weights(0)[3] = 1.0;
    m = nn::set_gates(nn::attach_adapters(m, {nn::AdapterKind::low_rank, 1}), true);
    auto b = m.adapter_first(0);
    auto a = m.adapter_second(0);
    b[0] = 1.0;
    b[1] = 0.0;
    a[0] = 0.0;
    a[1] = 1.0;
    const nn::Model merged = merge_lora(m);
    CHECK_FALSE(merged.has_adapters());
    const auto w = merged.weights(0);
    CHECK(std::vector<double>(w.begin(), w.end()) == std::vector<double>{1, 1, 0, 1});
  }
  SUBCASE("zero B gives the base model exactly") {
    const nn::Model base = nn::Model::initialized({4, 5, 3}, nn::Activation::relu, 2);
    const nn::Model lora = nn::set_gates(nn::attach_adapters(base, {nn::AdapterKind::low_rank, 2}, 9), true);
    CHECK(merge_lora(lora) == base);
    CHECK(merge_lora(nn::set_gates(lora, false)) == base);
  }
  SUBCASE("random rank-3 forward fidelity") {
    Rng rng = make_rng(31);
    nn::Model m = nn::Model::initialized({6, 8, 7, 3}, nn::Activation::tanh, 4);
    m = nn::set_gates(nn::attach_adapters(m, {nn::AdapterKind::low_rank, 3}, 5), true);
    for (std::size_t l = 0; l < 2; ++l) {
      for (double& v : m.adapter_first(l)) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
    const Matrix x = testing::random_matrix(50, 6, rng);
    CHECK(max_abs_diff(nn::logits(m, x), nn::logits(merge_lora(m), x)) < 1e-10);
  }
  SUBCASE("rejects non-LoRA models") {
    const nn::Model base = nn::Model::initialized({3, 3, 2}, nn::Activation::relu, 2);
    CHECK_THROWS_AS(merge_lora(base), StateError);
    CHECK_THROWS_AS(merge_lora(nn::attach_adapters(base, {nn::AdapterKind::full_residual, 0})), StateError);
  }
}

TEST_CASE("finetune") {
  const data::Domain source = tiny_domain(5, 3, 1);
  const data::Domain target = relabel(tiny_domain(5, 4, 2), 50);
  const nn::Model base = nn::Model::initialized({5, 8, 6, 3}, nn::Activation::relu, 7);
  optim::TrainConfig cfg;
  cfg.total_iterations = 40;
  cfg.restart_period = 40;
  cfg.batch_size = 8;
  cfg.seed = 3;

  SUBCASE("zero iterations returns the base backbone with a fresh head") {
    cfg.total_iterations = 0;
    const nn::Model out = finetune(base, target, cfg, FinetuneMode::vanilla);
    CHECK(out == with_fresh_head(base, 4, cfg.seed ^ 0x4eadULL));
    CHECK(out.output_dim() == 4);
    CHECK(out.backbone_parameters() == base.backbone_parameters());
  }
  SUBCASE("vanilla updates the backbone") {
    const nn::Model out = finetune(base, target, cfg, FinetuneMode::vanilla);
    CHECK(out.backbone_parameters() != base.backbone_parameters());
    CHECK_FALSE(out.has_adapters());
  }
  SUBCASE("lora freezes the backbone bitwise and keeps the factors") {
    const nn::Model out = finetune(base, target, cfg, FinetuneMode::lora, 2);
    CHECK(out.backbone_parameters() == base.backbone_parameters());
    CHECK(out.has_adapters());
    CHECK(out.gates_on());
    bool adapter_moved = false;
    for (std::size_t l = 0; l + 1 < out.num_layers(); ++l) {
      for (double v : out.adapter_first(l)) adapter_moved = adapter_moved || v != 0.0;
    }
    CHECK(adapter_moved);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(finetune(base, target, cfg, FinetuneMode::lora, 6), InvalidSpecError);
    CHECK_THROWS_AS(finetune(base, target, cfg, FinetuneMode::none), InvalidSpecError);
    const data::Domain wrong_dim = tiny_domain(4, 3, 1);
    CHECK_THROWS_AS(finetune(base, wrong_dim, cfg, FinetuneMode::vanilla), StructuralError);
    const data::Domain one_class = subset(source, source.indices_of(source.class_ids[0]), "one");
    CHECK_THROWS_AS(finetune(base, one_class, cfg, FinetuneMode::vanilla), StructuralError);
  }
}

TEST_CASE("checkpoint container") {
  Rng rng = make_rng(4);
  nn::Model m = nn::Model::initialized({3, 4, 2}, nn::Activation::tanh, 1);
  m = nn::set_gates(nn::attach_adapters(m, {nn::AdapterKind::low_rank, 1}, 2), true);
  testing::randomize(m, rng, 1.0);
  const Provenance prov = sample_provenance();
  const std::string bytes = encode_checkpoint(m, prov);

  CHECK(bytes.substr(0, 4) == "FFSC");
  CHECK(bytes[4] == 1);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.provenance == prov);
  CHECK(back.model.layer_dims() == m.layer_dims());
  CHECK(back.model.gates_on());
  for (std::size_t i = 0; i < m.parameter_count(); ++i) {
    CHECK(back.model.parameters()[i] == static_cast<double>(static_cast<float>(m.parameters()[i])));
  }
  CHECK(encode_checkpoint(back.model, back.provenance) == bytes);

  SUBCASE("every truncation is rejected") {
    for (std::size_t len = 0; len < bytes.size(); ++len) {
      CHECK_THROWS_AS(decode_checkpoint(std::string_view(bytes).substr(0, len)), CorruptCheckpointError);
    }
  }
  SUBCASE("bad magic, version, trailing bytes") {
    std::string b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(b), CorruptCheckpointError);
    b = bytes;
    b[4] = 2;
    CHECK_THROWS_AS(decode_checkpoint(b), CorruptCheckpointError);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CorruptCheckpointError);
  }
  SUBCASE("lora provenance without rank is invalid") {
    Provenance p = prov;
    p.finetune = FinetuneMode::lora;
    p.rank = 0;
    CHECK_THROWS_AS(encode_checkpoint(m, p), InvalidSpecError);
  }
}

TEST_CASE("provenance timestamp honours SOURCE_DATE_EPOCH") {
  setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(utc_timestamp() == "1970-01-02T00:00:00Z");
  setenv("SOURCE_DATE_EPOCH", "soon", 1);
  CHECK_THROWS_AS(utc_timestamp(), InvalidSpecError);
  unsetenv("SOURCE_DATE_EPOCH");
  CHECK(utc_timestamp().size() == 20);
}

TEST_CASE("backbone bank") {
  const fs::path dir = fresh_dir("bank");
  BackboneBank bank(dir);
  Rng rng = make_rng(6);
  nn::Model a = nn::Model::initialized({3, 5, 2}, nn::Activation::relu, 1);
  nn::Model b = nn::Model::initialized({3, 4, 4, 2}, nn::Activation::tanh, 2);
  const Provenance prov = sample_provenance();

  bank.put("alpha", a, prov);
  bank.put("beta", b, prov);

  SUBCASE("round trip to f32 precision") {
    const Checkpoint got = bank.get("alpha");
    CHECK(got.provenance == prov);
    for (std::size_t i = 0; i < a.parameter_count(); ++i) {
      const double x = a.parameters()[i];
      CHECK(std::abs(got.model.parameters()[i] - x) <= std::abs(x) * 6e-8);
    }
  }
  SUBCASE("list is sorted and complete") {
    const auto entries = bank.list();
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].name == "alpha");
    CHECK(entries[1].name == "beta");
    CHECK(entries[1].architecture["layer_dims"] == Json::array({3, 4, 4, 2}));
    CHECK(BackboneBank(dir).list().size() == 2);
  }
  SUBCASE("duplicates and missing entries") {
    CHECK_THROWS_AS(bank.put("alpha", b, prov), DuplicateEntryError);
    CHECK_THROWS_AS(bank.get("gamma"), MissingEntryError);
    CHECK_THROWS_AS(bank.put("../escape", a, prov), InvalidSpecError);
    CHECK_THROWS_AS(bank.put(".hidden", a, prov), InvalidSpecError);
  }
  SUBCASE("overwrite replaces the entry and its file") {
    bank.put("alpha", b, prov, {.overwrite = true});
    CHECK(bank.get("alpha").model.layer_dims() == b.layer_dims());
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
    CHECK(files == 4);
  }
  SUBCASE("crash before commit leaves the previous entry intact") {
    testing::randomize(b, rng, 1.0);
    PutOptions crash{.overwrite = true, .before_rename = [] { throw std::runtime_error("crash"); }};
    CHECK_THROWS_AS(bank.put("alpha", b, prov, crash), std::runtime_error);
    const Checkpoint got = bank.get("alpha");
    CHECK(got.model.layer_dims() == a.layer_dims());
    CHECK(bank.list().size() == 2);
    CHECK_THROWS_AS(bank.put("gamma", b, prov, {.before_rename = [] { throw std::runtime_error("x"); }}),
                    std::runtime_error);
    CHECK_FALSE(bank.contains("gamma"));
  }
  SUBCASE("truncated payload is reported and the rest of the bank works") {
    const fs::path file = bank.entry("beta").checkpoint;
    const auto size = fs::file_size(file);
    fs::resize_file(file, size - 3);
    CHECK_THROWS_AS(bank.get("beta"), CorruptCheckpointError);
    CHECK_NOTHROW(bank.get("alpha"));
    CHECK(bank.list().size() == 2);
    bank.put("beta", b, prov, {.overwrite = true});
    CHECK_NOTHROW(bank.get("beta"));
  }
}

TEST_CASE("bank files are byte-reproducible") {
  setenv("SOURCE_DATE_EPOCH", "0", 1);
  optim::TrainConfig cfg;
  const nn::Model m = nn::Model::initialized({3, 5, 2}, nn::Activation::relu, 1);
  auto write = [&](const std::string& tag) {
    BackboneBank bank(fresh_dir(tag));
    bank.put("m", m, make_provenance(cfg, "d"));
    const auto e = bank.entry("m");
    std::ifstream c(e.checkpoint, std::ios::binary), s(bank.directory() / "m.json");
    return std::string(std::istreambuf_iterator<char>(c), {}) + std::string(std::istreambuf_iterator<char>(s), {});
  };
  CHECK(write("r1") == write("r2"));
  unsetenv("SOURCE_DATE_EPOCH");
}

TEST_CASE("config json round trip and hash") {
  optim::TrainConfig cfg;
  cfg.rho = 0.2;
  cfg.objective = optim::ObjectiveKind::erm;
  cfg.seed = 99;
  CHECK(Json(cfg).get<optim::TrainConfig>() == cfg);
  const std::string h = config_hash(cfg);
  CHECK(h.size() == 16);
  cfg.seed = 100;
  CHECK(config_hash(cfg) != h);
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("fine-tuning on the target domain improves its episodic accuracy") {
  data::SyntheticSpec spec;
  spec.num_domains = 2;
  spec.classes_per_domain = 5;
  spec.samples_per_class = 40;
  spec.dim = 16;
  spec.shift = 2.0;
  spec.class_spread = 0.5;
  spec.sigma = 0.5;
  const auto domains = data::gen_synthetic_domains(spec, 5);
  const auto [target_train, target_test] = data::stratified_split(domains[1], 0.5, 5);

  optim::TrainConfig cfg;
  cfg.total_iterations = 1000;
  cfg.restart_period = 1000;
  cfg.seed = 5;
  const nn::Model init = nn::Model::initialized({16, 64, 8, 5}, nn::Activation::relu, 5);
  const nn::Model base = optim::train(init, domains[0], cfg).model;

  cfg.total_iterations = 300;
  cfg.restart_period = 300;
  const std::vector<data::Domain> eval_on{target_test};
  eval::EvalOptions opt;
  opt.tasks = 20;
  opt.protocol.seed = 5;
  const auto accuracy = [&](const nn::Model& m) {
    const std::vector<select::Candidate> one{{"m", m}};
    return eval::evaluate(one, eval_on, opt).domains[0].mean;
  };
  const double before = accuracy(base);
  for (auto mode : {FinetuneMode::vanilla, FinetuneMode::lora}) {
    const nn::Model tuned = finetune(base, target_train, cfg, mode, 4);
    const double after = accuracy(mode == FinetuneMode::lora ? merge_lora(tuned) : tuned);
    MESSAGE(to_string(mode) << ": base " << before << " -> fine-tuned " << after);
    CHECK(after >= before + 0.05);
  }
}
