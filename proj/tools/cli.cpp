#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "ffsc/data.hpp"
#include "ffsc/error.hpp"
#include "ffsc/eval.hpp"
#include "ffsc/flatness.hpp"
#include "ffsc/fusion.hpp"
#include "ffsc/nn.hpp"
#include "ffsc/optim.hpp"
#include "ffsc/select.hpp"
#include "ffsc/serialize.hpp"

namespace ffsc::cli {

namespace {

namespace fs = std::filesystem;

const std::set<std::string> kCommands{"gen-data", "train",     "finetune", "bank",  "select",
                                      "eval",     "flatness",  "landscape", "bound", "compare"};

// ---------------------------------------------------------------------------
// Option state shared by all subcommands

struct Common {
  std::string config;
  std::uint64_t seed = 0;
};

struct TrainFlags {
  optim::TrainConfig cfg;
  std::string objective = "sam";

  optim::TrainConfig resolve(std::uint64_t seed) const {
    optim::TrainConfig c = cfg;
    c.objective = optim::objective_from_string(objective);
    c.seed = seed;
    optim::validate(c);
    return c;
  }
};

struct AdaptFlags {
  select::AdaptConfig cfg{.steps = 0};
  std::string adapter = "full_residual";
  std::size_t rank = 0;

  select::AdaptConfig resolve(std::uint64_t seed) const {
    select::AdaptConfig c = cfg;
    c.adapter = {nn::adapter_kind_from_string(adapter), rank};
    c.seed = seed;
    return c;
  }
};

struct State {
  Common common;

  struct {
    data::SyntheticSpec spec;
    std::string out, idx_images, idx_labels, name = "idx";
  } gen;

  struct {
    std::string data, out, history, activation = "relu";
    std::vector<std::string> domains;
    std::vector<std::size_t> hidden{64};
    TrainFlags train;
  } train;

  struct {
    std::string base, data, domain, bank, name, mode = "lora", parent;
    std::size_t rank = 4;
    bool overwrite = false;
    TrainFlags train;
  } finetune;

  struct {
    std::string bank, name;
    bool json = false;
  } bank;

  struct {
    std::string bank, data, domain, out;
    std::uint64_t task = 0;
    data::EpisodeProtocol protocol;
  } select;

  struct {
    std::string bank, model, data, out, csv, mode;
    std::vector<std::string> domains;
    std::size_t tasks = 100;
    data::EpisodeProtocol protocol;
    AdaptFlags adapt;
  } eval;

  struct {
    std::string model, data, out;
    std::vector<std::string> domains;
    flatness::TraceOptions trace;
    flatness::EigenOptions eigen;
  } flat;

  struct {
    std::string model, data, out;
    std::vector<std::string> domains;
    std::size_t directions = 2;
    flatness::LandscapeOptions options;
    double sam_rho = 0.0;
  } landscape;

  struct {
    std::string model, data, out, tv_method = "analytic_gaussian";
    std::vector<std::string> sources, targets;
    std::size_t tasks = 20, tv_samples = 20000;
    data::EpisodeProtocol protocol;
    TrainFlags train;
  } bound;

  struct {
    std::string a, b, out;
  } compare;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON file supplying defaults for this command's options");
  app->add_option("--seed", c.seed, "Random seed");
}

void add_train_options(CLI::App* app, TrainFlags& f) {
  app->add_option("--objective", f.objective, "erm or sam");
  app->add_option("--rho", f.cfg.rho, "Perturbation radius for sam");
  app->add_option("--batch-size", f.cfg.batch_size);
  app->add_option("--base-lr", f.cfg.base_lr);
  app->add_option("--min-lr", f.cfg.min_lr);
  app->add_option("--total-iterations", f.cfg.total_iterations);
  app->add_option("--restart-period", f.cfg.restart_period, "Cosine schedule period");
  app->add_option("--momentum", f.cfg.momentum);
  app->add_option("--weight-decay", f.cfg.weight_decay);
}

void add_protocol_options(CLI::App* app, data::EpisodeProtocol& p) {
  app->add_option("--min-way", p.min_way);
  app->add_option("--max-way", p.max_way);
  app->add_option("--min-shot", p.min_shot);
  app->add_option("--max-shot", p.max_shot);
  app->add_option("--query-per-class", p.query_per_class);
}

// ---------------------------------------------------------------------------
// Config files

std::string scalar_text(const Json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw InvalidSpecError("config key '" + key + "' must hold a scalar or a list of scalars");
}

/// Top-level scalars apply to every command, objects named after a command
/// apply to that command only (unknown keys there are errors), and any other
/// object is a group whose members apply wherever a matching option exists.
void apply_config(CLI::App* leaf, const std::string& command, const std::string& path) {
  const Json config = read_json_file(path);
  if (!config.is_object()) throw InvalidSpecError("config '" + path + "' must be a JSON object");
  std::map<std::string, std::pair<Json, bool>> merged;
  for (const auto& [key, value] : config.items()) {
    if (!value.is_object()) merged[key] = {value, false};
  }
  for (const auto& [key, value] : config.items()) {
    if (value.is_object() && !kCommands.contains(key)) {
      for (const auto& [k, v] : value.items()) merged[k] = {v, false};
    }
  }
  if (config.contains(command) && config.at(command).is_object()) {
    for (const auto& [k, v] : config.at(command).items()) merged[k] = {v, true};
  }
  for (const auto& [key, entry] : merged) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (name == "config") continue;
    CLI::Option* opt = leaf->get_option_no_throw("--" + name);
    if (opt == nullptr) {
      if (entry.second) throw InvalidSpecError("config '" + path + "': unknown key '" + key + "' for " + command);
      continue;
    }
    if (opt->count() > 0) continue;
    opt->clear();
    if (entry.first.is_array()) {
      for (const auto& e : entry.first) opt->add_result(scalar_text(e, key));
    } else {
      opt->add_result(scalar_text(entry.first, key));
    }
    opt->run_callback();
  }
}

// ---------------------------------------------------------------------------
// Helpers

const data::Domain& find_domain(const std::vector<data::Domain>& domains, const std::string& name) {
  for (const auto& d : domains) {
    if (d.name == name) return d;
  }
  std::string known;
  for (const auto& d : domains) known += (known.empty() ? "" : ", ") + d.name;
  throw InvalidSpecError("no domain named '" + name + "' (available: " + known + ")");
}

std::vector<data::Domain> pick_domains(const std::vector<data::Domain>& all, const std::vector<std::string>& names) {
  if (names.empty()) return all;
  std::vector<data::Domain> out;
  for (const auto& n : names) out.push_back(find_domain(all, n));
  return out;
}

data::Domain pool(const std::vector<data::Domain>& domains) {
  if (domains.size() == 1) return domains.front();
  data::check_disjoint_classes(domains);
  std::size_t rows = 0;
  std::string name;
  for (const auto& d : domains) {
    if (d.dim() != domains.front().dim()) throw StructuralError("domains to pool have different dimensions");
    rows += d.size();
    name += (name.empty() ? "" : "+") + d.name;
  }
  Matrix x(rows, domains.front().dim());
  std::vector<int> labels;
  std::size_t r = 0;
  for (const auto& d : domains) {
    for (std::size_t i = 0; i < d.size(); ++i, ++r) std::copy(d.samples.row(i).begin(), d.samples.row(i).end(), x.row(r).begin());
    labels.insert(labels.end(), d.labels.begin(), d.labels.end());
  }
  data::Domain pooled = data::make_domain(name, std::move(x), std::move(labels));
  std::map<int, std::vector<double>> means;
  for (const auto& d : domains) {
    if (!d.generator || d.generator->sigma != domains.front().generator->sigma) return pooled;
    for (std::size_t k = 0; k < d.class_ids.size(); ++k) means[d.class_ids[k]] = d.generator->means[k];
  }
  data::GaussianMixture g{{}, domains.front().generator->sigma};
  for (auto& [id, mean] : means) g.means.push_back(std::move(mean));
  pooled.generator = std::move(g);
  return pooled;
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_text_file(path, text);
  }
}

std::string pretty(const Json& j) { return j.dump(2) + "\n"; }

Json entry_json(const fusion::BankEntry& e) {
  return Json{{"name", e.name},
              {"checkpoint", e.checkpoint.filename().string()},
              {"provenance", e.provenance},
              {"architecture", e.architecture}};
}

// ---------------------------------------------------------------------------
// Commands

void run_gen_data(const State& s, std::ostream& out) {
  std::vector<data::Domain> domains;
  Json meta;
  if (!s.gen.idx_images.empty() || !s.gen.idx_labels.empty()) {
    if (s.gen.idx_images.empty() || s.gen.idx_labels.empty()) {
      throw InvalidSpecError("--idx-images and --idx-labels go together");
    }
    domains.push_back(data::load_idx(s.gen.idx_images, s.gen.idx_labels, s.gen.name));
    meta = {{"source", "idx"}};
  } else {
    domains = data::gen_synthetic_domains(s.gen.spec, s.common.seed);
    meta = {{"source", "synthetic"}, {"spec", s.gen.spec}, {"seed", s.common.seed}};
  }
  save_dataset(s.gen.out, domains, meta);
  std::size_t rows = 0;
  for (const auto& d : domains) rows += d.size();
  out << "wrote " << domains.size() << " domains (" << rows << " samples) to " << s.gen.out << "\n";
}

void run_train(const State& s, std::ostream& out) {
  const auto all = load_dataset(s.train.data);
  const data::Domain dataset = pool(pick_domains(all, s.train.domains));
  const optim::TrainConfig cfg = s.train.train.resolve(s.common.seed);
  std::vector<std::size_t> dims{dataset.dim()};
  dims.insert(dims.end(), s.train.hidden.begin(), s.train.hidden.end());
  dims.push_back(dataset.num_classes());
  const nn::Model init = nn::Model::initialized(dims, nn::activation_from_string(s.train.activation), s.common.seed);
  const optim::TrainResult result = optim::train(init, dataset, cfg);
  fusion::write_checkpoint(s.train.out, result.model, fusion::make_provenance(cfg, dataset.name));
  if (!s.train.history.empty()) {
    std::ostringstream csv;
    csv << "iteration,loss,lr,grad_norm\n";
    csv.precision(10);
    for (std::size_t t = 0; t < result.history.loss.size(); ++t) {
      csv << t << "," << result.history.loss[t] << "," << result.history.lr[t] << "," << result.history.grad_norm[t]
          << "\n";
    }
    write_text_file(s.train.history, csv.str());
  }
  out << "trained " << to_string(cfg.objective) << " model on " << dataset.name << " ("
      << cfg.total_iterations << " iterations, final loss " << result.history.loss.back() << ") -> "
      << s.train.out << "\n";
}

void run_finetune(const State& s, std::ostream& out) {
  const fusion::Checkpoint base = fusion::read_checkpoint(s.finetune.base);
  const auto all = load_dataset(s.finetune.data);
  const data::Domain& domain = find_domain(all, s.finetune.domain);
  const optim::TrainConfig cfg = s.finetune.train.resolve(s.common.seed);
  const fusion::FinetuneMode mode = fusion::finetune_mode_from_string(s.finetune.mode);
  const std::size_t rank = mode == fusion::FinetuneMode::lora ? s.finetune.rank : 0;
  nn::Model model = fusion::finetune(base.model, domain, cfg, mode, rank);
  if (mode == fusion::FinetuneMode::lora) model = fusion::merge_lora(model);
  const std::string name = s.finetune.name.empty() ? domain.name : s.finetune.name;
  const std::string parent = s.finetune.parent.empty() ? fs::path(s.finetune.base).stem().string() : s.finetune.parent;
  fusion::BackboneBank bank(s.finetune.bank);
  bank.put(name, model, fusion::make_provenance(cfg, domain.name, parent, mode, rank),
           {.overwrite = s.finetune.overwrite, .before_rename = {}});
  out << "stored " << name << " (" << s.finetune.mode << " fine-tune of " << parent << " on " << domain.name
      << ") in " << s.finetune.bank << "\n";
}

void run_bank_list(const State& s, std::ostream& out) {
  const fusion::BackboneBank bank(s.bank.bank);
  const auto entries = bank.list();
  if (s.bank.json) {
    Json list = Json::array();
    for (const auto& e : entries) list.push_back(entry_json(e));
    out << pretty(list);
    return;
  }
  out << "name\tobjective\trho\tfinetune\trank\tsource_dataset\tparent\n";
  for (const auto& e : entries) {
    const auto& p = e.provenance;
    out << e.name << "\t" << to_string(p.objective) << "\t" << p.rho << "\t" << to_string(p.finetune) << "\t"
        << p.rank << "\t" << p.source_dataset << "\t" << p.parent.value_or("-") << "\n";
  }
}

void run_bank_inspect(const State& s, std::ostream& out) {
  const fusion::BackboneBank bank(s.bank.bank);
  out << pretty(entry_json(bank.entry(s.bank.name)));
}

void run_select(const State& s, std::ostream& out) {
  const fusion::BackboneBank bank(s.select.bank);
  const auto all = load_dataset(s.select.data);
  data::EpisodeProtocol protocol = s.select.protocol;
  protocol.seed = s.common.seed;
  const data::Episode episode = data::sample_episode(find_domain(all, s.select.domain), protocol, s.select.task);
  const auto report = select::select_backbone(bank, episode.support);
  Json j = report;
  j["domain"] = s.select.domain;
  j["task"] = s.select.task;
  j["way"] = episode.way;
  emit(pretty(j), s.select.out, out);
}

void run_eval(const State& s, std::ostream& out) {
  if (s.eval.bank.empty() == s.eval.model.empty()) throw InvalidSpecError("eval needs exactly one of --bank or --model");
  std::vector<select::Candidate> candidates;
  if (!s.eval.bank.empty()) {
    candidates = select::load_candidates(fusion::BackboneBank(s.eval.bank));
  } else {
    candidates.push_back({fs::path(s.eval.model).stem().string(), fusion::read_checkpoint(s.eval.model).model});
  }
  const auto domains = pick_domains(load_dataset(s.eval.data), s.eval.domains);
  eval::EvalOptions opt;
  opt.tasks = s.eval.tasks;
  opt.protocol = s.eval.protocol;
  opt.protocol.seed = s.common.seed;
  opt.mode = s.eval.mode.empty() ? (s.eval.bank.empty() ? eval::Mode::seen : eval::Mode::unseen)
                                 : eval::mode_from_string(s.eval.mode);
  opt.adapt = s.eval.adapt.resolve(s.common.seed);
  const eval::EvalReport report = eval::evaluate(candidates, domains, opt);
  if (!s.eval.out.empty()) eval::emit_report(report, eval::ReportFormat::json, s.eval.out);
  if (!s.eval.csv.empty()) eval::emit_report(report, eval::ReportFormat::csv, s.eval.csv);
  out << eval::render_report(report, eval::ReportFormat::csv);
}

std::vector<std::string> split_names(const std::string& joined) {
  std::vector<std::string> names;
  std::size_t start = 0;
  while (start <= joined.size()) {
    const std::size_t end = std::min(joined.find('+', start), joined.size());
    names.push_back(joined.substr(start, end - start));
    start = end + 1;
  }
  return names;
}

/// The named domains pooled, or those the checkpoint was trained on.
data::Domain training_domain(const std::vector<data::Domain>& all, const std::vector<std::string>& names,
                             const fusion::Provenance& provenance) {
  return pool(pick_domains(all, names.empty() ? split_names(provenance.source_dataset) : names));
}

struct LoadedObjective {
  nn::Model model;
  nn::Batch batch;
  std::string domain;
};

LoadedObjective load_objective(const std::string& model_path, const std::string& data,
                               const std::vector<std::string>& domains) {
  fusion::Checkpoint ckpt = fusion::read_checkpoint(model_path);
  const data::Domain d = training_domain(load_dataset(data), domains, ckpt.provenance);
  return {std::move(ckpt.model), optim::indexed_batch(d), d.name};
}

void run_flatness(const State& s, std::ostream& out) {
  const auto loaded = load_objective(s.flat.model, s.flat.data, s.flat.domains);
  const ModelObjective objective(loaded.model, loaded.batch);
  flatness::FlatnessOptions opt{s.flat.trace, s.flat.eigen, flatness::batch_fingerprint(loaded.batch)};
  opt.trace.seed = s.common.seed;
  opt.eigen.seed = s.common.seed;
  const std::vector<double> theta(loaded.model.parameters().begin(), loaded.model.parameters().end());
  Json j = flatness::flatness_report(objective, theta, opt);
  j["model"] = fs::path(s.flat.model).filename().string();
  j["domain"] = loaded.domain;
  emit(pretty(j), s.flat.out, out);
}

void run_landscape(const State& s, std::ostream& out) {
  const auto loaded = load_objective(s.landscape.model, s.landscape.data, s.landscape.domains);
  const ModelObjective objective(loaded.model, loaded.batch);
  const std::vector<double> theta(loaded.model.parameters().begin(), loaded.model.parameters().end());
  const auto dirs = flatness::random_directions(theta.size(), s.landscape.directions, s.common.seed);
  flatness::LandscapeOptions opt = s.landscape.options;
  if (s.landscape.sam_rho > 0.0) opt.sam_rho = s.landscape.sam_rho;
  emit(flatness::landscape_slice(objective, theta, dirs, opt).csv(), s.landscape.out, out);
}

void run_bound(const State& s, std::ostream& out) {
  const fusion::Checkpoint ckpt = fusion::read_checkpoint(s.bound.model);
  const auto all = load_dataset(s.bound.data);
  const data::Domain source = training_domain(all, s.bound.sources, ckpt.provenance);
  const auto source_names = split_names(source.name);
  std::vector<data::Domain> targets;
  if (s.bound.targets.empty()) {
    for (const auto& d : all) {
      if (std::find(source_names.begin(), source_names.end(), d.name) == source_names.end()) targets.push_back(d);
    }
  } else {
    targets = pick_domains(all, s.bound.targets);
  }
  flatness::BoundOptions opt;
  opt.config = s.bound.train.resolve(s.common.seed);
  opt.protocol = s.bound.protocol;
  opt.protocol.seed = s.common.seed;
  opt.tasks = s.bound.tasks;
  opt.divergence = {flatness::tv_method_from_string(s.bound.tv_method), s.bound.tv_samples, s.common.seed};
  Json j = flatness::bound_report(ckpt.model, source, targets, opt);
  j["source"] = source.name;
  emit(pretty(j), s.bound.out, out);
}

void run_compare(const State& s, std::ostream& out) {
  const auto c = eval::compare_reports(eval::load_report(s.compare.a), eval::load_report(s.compare.b));
  Json j = c;
  j["a"] = s.compare.a;
  j["b"] = s.compare.b;
  emit(pretty(j), s.compare.out, out);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  State s;
  CLI::App app{"Few-shot backbone training, selection and flatness diagnostics", "ffsc"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->always_capture_default();

  std::vector<std::pair<CLI::App*, std::function<void(const State&, std::ostream&)>>> leaves;
  auto leaf = [&](CLI::App* sub, auto fn) {
    add_common(sub, s.common);
    leaves.emplace_back(sub, fn);
    return sub;
  };

  auto* gen = leaf(app.add_subcommand("gen-data", "Generate synthetic domains or convert IDX files"), run_gen_data);
  gen->add_option("--out", s.gen.out, "Dataset file to write")->required();
  gen->add_option("--num-domains", s.gen.spec.num_domains);
  gen->add_option("--classes-per-domain", s.gen.spec.classes_per_domain);
  gen->add_option("--samples-per-class", s.gen.spec.samples_per_class);
  gen->add_option("--dim", s.gen.spec.dim);
  gen->add_option("--shift", s.gen.spec.shift, "Distance of each domain's class means from the shared template");
  gen->add_option("--sigma", s.gen.spec.sigma);
  gen->add_option("--class-spread", s.gen.spec.class_spread);
  gen->add_option("--label-noise", s.gen.spec.label_noise, "Fraction of flipped labels");
  gen->add_option("--names", s.gen.spec.names, "Domain names")->delimiter(',');
  gen->add_option("--idx-images", s.gen.idx_images, "IDX image file (instead of synthetic data)");
  gen->add_option("--idx-labels", s.gen.idx_labels, "IDX label file");
  gen->add_option("--name", s.gen.name, "Domain name for IDX input");

  auto* train = leaf(app.add_subcommand("train", "Train a base model on one or more pooled domains"), run_train);
  train->add_option("--data", s.train.data, "Dataset file")->required();
  train->add_option("--domain", s.train.domains, "Domains to pool (default: all)")->delimiter(',');
  train->add_option("--out", s.train.out, "Checkpoint to write")->required();
  train->add_option("--hidden", s.train.hidden, "Hidden layer widths")->delimiter(',');
  train->add_option("--activation", s.train.activation, "relu, tanh or identity");
  train->add_option("--history", s.train.history, "CSV file for the per-iteration loss");
  add_train_options(train, s.train.train);

  auto* ft = leaf(app.add_subcommand("finetune", "Fine-tune a base model on a domain and store it in a bank"),
                  run_finetune);
  ft->add_option("--base", s.finetune.base, "Base checkpoint")->required();
  ft->add_option("--data", s.finetune.data, "Dataset file")->required();
  ft->add_option("--domain", s.finetune.domain, "Domain to fine-tune on")->required();
  ft->add_option("--bank", s.finetune.bank, "Bank directory")->required();
  ft->add_option("--name", s.finetune.name, "Entry name (default: the domain name)");
  ft->add_option("--parent", s.finetune.parent, "Parent name recorded in the provenance (default: base file stem)");
  ft->add_option("--mode", s.finetune.mode, "vanilla or lora");
  ft->add_option("--rank", s.finetune.rank, "Adapter rank for lora");
  ft->add_flag("--overwrite", s.finetune.overwrite, "Replace an existing entry");
  add_train_options(ft, s.finetune.train);

  auto* bank = app.add_subcommand("bank", "Inspect a backbone bank");
  bank->require_subcommand(1);
  auto* list = leaf(bank->add_subcommand("list", "List entries"), run_bank_list);
  list->add_option("--bank", s.bank.bank, "Bank directory")->required();
  list->add_flag("--json", s.bank.json, "Print the entries as JSON");
  auto* inspect = leaf(bank->add_subcommand("inspect", "Show one entry"), run_bank_inspect);
  inspect->add_option("--bank", s.bank.bank, "Bank directory")->required();
  inspect->add_option("name", s.bank.name, "Entry name")->required();

  auto* sel = leaf(app.add_subcommand("select", "Score every bank entry on one task's support set"), run_select);
  sel->add_option("--bank", s.select.bank, "Bank directory")->required();
  sel->add_option("--data", s.select.data, "Dataset file")->required();
  sel->add_option("--domain", s.select.domain, "Domain to sample the task from")->required();
  sel->add_option("--task", s.select.task, "Task index");
  sel->add_option("--out", s.select.out, "JSON file (default: stdout)");
  add_protocol_options(sel, s.select.protocol);

  auto* ev = leaf(app.add_subcommand("eval", "Episodic evaluation"), run_eval);
  ev->add_option("--bank", s.eval.bank, "Bank directory (selection per task)");
  ev->add_option("--model", s.eval.model, "Single checkpoint");
  ev->add_option("--data", s.eval.data, "Dataset file")->required();
  ev->add_option("--domains", s.eval.domains, "Domains to evaluate (default: all)")->delimiter(',');
  ev->add_option("--tasks", s.eval.tasks, "Tasks per domain");
  ev->add_option("--mode", s.eval.mode, "seen or unseen (default: unseen with --bank, seen with --model)");
  ev->add_option("--out", s.eval.out, "JSON report");
  ev->add_option("--csv", s.eval.csv, "CSV summary");
  add_protocol_options(ev, s.eval.protocol);
  ev->add_option("--adapt-steps", s.eval.adapt.cfg.steps, "Adapter steps per task (0: plain nearest centroid)");
  ev->add_option("--adapt-lr", s.eval.adapt.cfg.lr);
  ev->add_option("--adapt-momentum", s.eval.adapt.cfg.momentum);
  ev->add_option("--adapt-max-grad-norm", s.eval.adapt.cfg.max_grad_norm, "Gradient norm cap (0: none)");
  ev->add_option("--adapter", s.eval.adapt.adapter, "full_residual or low_rank");
  ev->add_option("--adapter-rank", s.eval.adapt.rank);

  auto* fl = leaf(app.add_subcommand("flatness", "Hessian trace and top eigenvalues of the training loss"),
                  run_flatness);
  fl->add_option("--model", s.flat.model, "Checkpoint")->required();
  fl->add_option("--data", s.flat.data, "Dataset file")->required();
  fl->add_option("--domain", s.flat.domains, "Domains pooled into the batch (default: the training domains)")
      ->delimiter(',');
  fl->add_option("--probes", s.flat.trace.probes, "Hutchinson probes");
  fl->add_flag("--exact", s.flat.trace.exact, "Exact trace over the standard basis");
  fl->add_option("--top-k", s.flat.eigen.k, "Number of eigenvalues");
  fl->add_option("--power-iterations", s.flat.eigen.iterations);
  fl->add_option("--tolerance", s.flat.eigen.tolerance);
  fl->add_option("--out", s.flat.out, "JSON file (default: stdout)");

  auto* ls = leaf(app.add_subcommand("landscape", "Loss on a 1-D or 2-D slice through the parameters"),
                  run_landscape);
  ls->add_option("--model", s.landscape.model, "Checkpoint")->required();
  ls->add_option("--data", s.landscape.data, "Dataset file")->required();
  ls->add_option("--domain", s.landscape.domains, "Domains pooled into the batch (default: the training domains)")
      ->delimiter(',');
  ls->add_option("--directions", s.landscape.directions, "1 or 2");
  ls->add_option("--half-range", s.landscape.options.half_range);
  ls->add_option("--steps", s.landscape.options.steps, "Grid points per axis (odd)");
  ls->add_option("--sam-rho", s.landscape.sam_rho, "Also evaluate the sharpness-aware loss with this radius");
  ls->add_option("--sam-resolution", s.landscape.options.sam_resolution);
  ls->add_option("--out", s.landscape.out, "CSV file (default: stdout)");

  auto* bd = leaf(app.add_subcommand("bound", "Computable terms of the transfer bound"), run_bound);
  bd->add_option("--model", s.bound.model, "Source checkpoint")->required();
  bd->add_option("--data", s.bound.data, "Dataset file")->required();
  bd->add_option("--source", s.bound.sources, "Source domains (default: the training domains)")->delimiter(',');
  bd->add_option("--targets", s.bound.targets, "Target domains (default: all others)")->delimiter(',');
  bd->add_option("--tasks", s.bound.tasks, "Episodes per target");
  bd->add_option("--tv-method", s.bound.tv_method, "analytic_gaussian or monte_carlo");
  bd->add_option("--tv-samples", s.bound.tv_samples);
  bd->add_option("--out", s.bound.out, "JSON file (default: stdout)");
  add_protocol_options(bd, s.bound.protocol);
  add_train_options(bd, s.bound.train);

  auto* cmp = leaf(app.add_subcommand("compare", "Paired t-test between two evaluation reports"), run_compare);
  cmp->add_option("a", s.compare.a, "First report")->required();
  cmp->add_option("b", s.compare.b, "Second report")->required();
  cmp->add_option("--out", s.compare.out, "JSON file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    for (const auto& [sub, fn] : leaves) {
      if (!sub->parsed()) continue;
      const std::string command = sub->get_parent() == &app ? sub->get_name() : sub->get_parent()->get_name();
      if (!s.common.config.empty()) apply_config(sub, command, s.common.config);
      fn(s, out);
      return 0;
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ffsc::cli
