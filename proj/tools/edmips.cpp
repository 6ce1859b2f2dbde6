// edmips: command-line driver for mixed-precision search experiments.
//
//   edmips search      --config cfg.json [--eta X] [--seed S] [--epochs N] [--out DIR]
//   edmips discretize  --run DIR [--mode wta|sample] [--trials N] [--seed S]
//   edmips retrain     --run DIR (--arch FILE | --uniform W,A) [--baselines]
//   edmips eval        --run DIR --checkpoint FILE [--arch FILE]
//   edmips sensitivity --run DIR --arch FILE --layer K --bits W,A
//   edmips report      --run DIR
//
// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 numerical abort.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "edmips/checkpoint.hpp"
#include "edmips/config.hpp"
#include "edmips/dataset.hpp"
#include "edmips/io.hpp"
#include "edmips/network.hpp"
#include "edmips/quantizer.hpp"
#include "edmips/report.hpp"
#include "edmips/search.hpp"

namespace fs = std::filesystem;
using namespace edmips;

namespace {

std::vector<std::string> g_args;

struct Run {
  ExperimentConfig cfg;
  std::string dir;
};

Run open_run(const std::string& run_dir, const std::string& config_path) {
  if (!run_dir.empty()) {
    const std::string p = (fs::path(run_dir) / "config.json").string();
    if (!fs::exists(p)) throw ConfigError(run_dir + " has no config.json; run search first or pass --config");
    return {load_config(p), run_dir};
  }
  if (config_path.empty()) throw ConfigError("pass --run DIR or --config FILE");
  ExperimentConfig cfg = load_config(config_path);
  return {cfg, cfg.output_dir};
}

std::string in_dir(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_manifest(const Run& run, const std::string& command) {
  write_json_file(in_dir(run.dir, "manifest." + command + ".json"), make_manifest(command, run.cfg, g_args));
}

std::pair<int, int> parse_bits(const std::string& s) {
  int w = 0, a = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "%d,%d%c", &w, &a, &tail) != 2) {
    throw ConfigError("bit pair must look like W,A (got '" + s + "')");
  }
  if (w < kMinBits || w > kMaxBits || a < kMinBits || a > kMaxBits) {
    throw ConfigError("bit-widths must lie in [1,8] (got '" + s + "')");
  }
  return {w, a};
}

void log_epoch(const char* what, const EpochRecord& r) {
  std::fprintf(stderr, "[%s] epoch %zu  loss %.4f  acc %.4f  cost %.4f  lr %.4g\n", what, r.epoch,
               r.train_loss, r.train_accuracy, r.expected_cost, r.lr_weights);
}

Network restore_search_model(const Run& run) {
  Network net = make_search_model(run.cfg.network(), run.cfg.search);
  net.load_state(load_checkpoint(in_dir(run.dir, "search.ckpt")));
  return net;
}

std::string uniform_label(int w, int a) { return "W" + std::to_string(w) + "A" + std::to_string(a); }

// ------------------------------------------------------------------ search

int cmd_search(const std::string& config_path, std::optional<double> eta,
               std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs,
               const std::string& out) {
  Run run{load_config(config_path), ""};
  if (eta) run.cfg.search.eta = *eta;
  if (seed) run.cfg.search.seed = *seed;
  if (epochs) run.cfg.search.search_epochs = *epochs;
  if (!out.empty()) run.cfg.output_dir = out;
  try {
    run.cfg.search.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  run.dir = run.cfg.output_dir;
  fs::create_directories(run.dir);
  write_json_file(in_dir(run.dir, "config.json"), to_json(run.cfg));
  write_manifest(run, "search");

  const DatasetSplit data = load_dataset(run.cfg.dataset);
  Network net = make_search_model(run.cfg.network(), run.cfg.search);
  const EvolutionLog log = search(net, data.train, run.cfg.search,
                                  [](const EpochRecord& r) { log_epoch("search", r); });

  write_text_file(in_dir(run.dir, "evolution.csv"), csv_text([&](std::ostream& os) { log.write_pi_csv(os); }));
  write_text_file(in_dir(run.dir, "epochs.csv"), csv_text([&](std::ostream& os) { log.write_epochs_csv(os); }));
  const auto probs = net.probs();
  const ComplexityModel cm = net.complexity(run.cfg.search.eta);
  write_text_file(in_dir(run.dir, "cost_report.csv"),
                  csv_text([&](std::ostream& os) { cm.write_cost_report(os, probs); }));
  std::vector<const LloydQuantizer*> qs;
  for (int b : run.cfg.search.pool.weight_bits) qs.push_back(&unit_gaussian_quantizer(b, QuantizerKind::weight));
  for (int b : run.cfg.search.pool.activation_bits) {
    qs.push_back(&unit_gaussian_quantizer(b, QuantizerKind::activation));
  }
  write_text_file(in_dir(run.dir, "quantizers.csv"),
                  csv_text([&](std::ostream& os) { write_quantizer_table_csv(os, qs); }));
  save_checkpoint(in_dir(run.dir, "search.ckpt"), net.state());

  const EvalResult ev = evaluate(net, data.val);
  nlohmann::json res{{"schema", kResultSchema},
                     {"kind", "search"},
                     {"accuracy", ev.accuracy},
                     {"val_loss", ev.loss},
                     {"expected_cost", cm.network_cost(probs)},
                     {"normalizer", cm.normalizer()},
                     {"eta", run.cfg.search.eta}};
  write_json_file(in_dir(run.dir, "search_result.json"), res);
  std::cout << "search finished: relaxed val accuracy " << ev.accuracy << ", expected cost "
            << cm.network_cost(probs) << "\nrun directory: " << run.dir << "\n";
  return 0;
}

// -------------------------------------------------------------- discretize

int cmd_discretize(const std::string& run_dir, const std::string& mode, std::size_t trials,
                   std::uint64_t seed, const std::string& out) {
  Run run = open_run(run_dir, "");
  if (trials == 0) throw ConfigError("--trials must be at least 1");
  Network net = restore_search_model(run);
  Architecture arch = mode == "wta" ? discretize_wta(net) : discretize_sample(net, trials, seed);
  check_in_pools(arch, layer_pools(net));
  nlohmann::json j = architecture_to_json(arch, net);
  j["selection"] = mode;
  if (mode == "sample") j["trials"] = trials, j["sample_seed"] = seed;
  const std::string path = out.empty() ? in_dir(run.dir, "architecture.json") : out;
  write_json_file(path, j);
  write_manifest(run, "discretize");
  for (const auto& l : arch.layers) {
    std::cout << "layer " << l.layer_id << ": W" << l.weight_bits << "A" << l.activation_bits << "\n";
  }
  std::cout << "total BitOps " << j["total_bitops"].get<double>() << " -> " << path << "\n";
  return 0;
}

// ----------------------------------------------------------------- retrain

void retrain_one(const Run& run, const DatasetSplit& data, const Architecture& arch,
                 const std::string& label, const std::string& out_path) {
  std::optional<Network> trained;
  const RetrainResult r = retrain(run.cfg.network(), arch, run.cfg.search, data.train, data.val, &trained,
                                  [&](const EpochRecord& e) { log_epoch(label.c_str(), e); });
  write_json_file(out_path, retrain_result_to_json(r, arch, label));
  save_checkpoint(fs::path(out_path).replace_extension(".ckpt").string(), trained->state());
  std::cout << label << ": accuracy " << r.accuracy << ", BitOps " << r.bitops << "\n";
}

int cmd_retrain(const std::string& run_dir, const std::string& config_path, const std::string& arch_path,
                const std::string& uniform, bool baselines, std::optional<std::size_t> epochs,
                std::optional<std::uint64_t> seed) {
  Run run = open_run(run_dir, config_path);
  if (epochs) run.cfg.search.retrain_epochs = *epochs;
  if (seed) run.cfg.search.seed = *seed;
  if (arch_path.empty() && uniform.empty() && !baselines) {
    throw ConfigError("retrain needs --arch, --uniform or --baselines");
  }
  const NetworkSpec spec = run.cfg.network();
  const std::size_t layers = count_searchable(spec);
  const DatasetSplit data = load_dataset(run.cfg.dataset);
  write_manifest(run, "retrain");
  if (!arch_path.empty()) {
    const Architecture arch = load_architecture(arch_path);
    retrain_one(run, data, arch, fs::path(arch_path).stem().string(),
                in_dir(run.dir, "results/" + fs::path(arch_path).stem().string() + ".json"));
  }
  if (!uniform.empty()) {
    const auto [w, a] = parse_bits(uniform);
    retrain_one(run, data, Architecture::uniform(layers, w, a), uniform_label(w, a),
                in_dir(run.dir, "results/" + uniform_label(w, a) + ".json"));
  }
  if (baselines) {
    for (int b : run.cfg.search.pool.activation_bits) {
      const auto& wb = run.cfg.search.pool.weight_bits;
      if (std::find(wb.begin(), wb.end(), b) == wb.end()) continue;
      retrain_one(run, data, Architecture::uniform(layers, b, b), uniform_label(b, b),
                  in_dir(run.dir, "baselines/" + uniform_label(b, b) + ".json"));
    }
  }
  return 0;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const std::string& run_dir, const std::string& config_path, const std::string& ckpt,
             const std::string& arch_path, const std::string& out) {
  Run run = open_run(run_dir, config_path);
  const DatasetSplit data = load_dataset(run.cfg.dataset);
  std::optional<Network> net;
  std::optional<Architecture> arch;
  if (!arch_path.empty()) {
    arch = load_architecture(arch_path);
    net.emplace(build_model(run.cfg.network(), FixedBuild{*arch}, run.cfg.search.seed));
  } else {
    net.emplace(make_search_model(run.cfg.network(), run.cfg.search));
  }
  net->load_state(load_checkpoint(ckpt.empty() ? in_dir(run.dir, "search.ckpt") : ckpt));
  const EvalResult ev = evaluate(*net, data.val);
  const ComplexityModel cm = net->complexity(0);
  nlohmann::json j{{"schema", kResultSchema}, {"kind", "eval"}, {"accuracy", ev.accuracy},
                   {"val_loss", ev.loss}, {"normalizer", cm.normalizer()}};
  if (arch) j["bitops"] = cm.discrete_bitops(arch->bit_pairs());
  else j["expected_cost"] = cm.network_cost(net->probs());
  write_json_file(out.empty() ? in_dir(run.dir, "eval.json") : out, j);
  write_manifest(run, "eval");
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------- sensitivity

int cmd_sensitivity(const std::string& run_dir, const std::string& config_path, const std::string& arch_path,
                    std::size_t layer, const std::string& bits, const std::string& out) {
  Run run = open_run(run_dir, config_path);
  const auto [w, a] = parse_bits(bits);
  const Architecture base = load_architecture(arch_path);
  const DatasetSplit data = load_dataset(run.cfg.dataset);
  const SensitivityResult r =
      sensitivity_probe(run.cfg.network(), base, layer, w, a, run.cfg.search, data.train, data.val);
  nlohmann::json j{{"schema", kResultSchema},
                   {"kind", "sensitivity"},
                   {"layer_id", r.layer_id},
                   {"base_bits", {r.base.weight_bits, r.base.activation_bits}},
                   {"bumped_bits", {r.bumped.weight_bits, r.bumped.activation_bits}},
                   {"base_accuracy", r.base_accuracy},
                   {"bumped_accuracy", r.bumped_accuracy},
                   {"delta_accuracy", r.delta_accuracy},
                   {"base_bitops", r.base_bitops},
                   {"bumped_bitops", r.bumped_bitops},
                   {"delta_bitops", r.delta_bitops}};
  write_json_file(out.empty() ? in_dir(run.dir, "sensitivity_layer" + std::to_string(layer) + ".json") : out, j);
  write_manifest(run, "sensitivity");
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------------ report

std::vector<std::pair<std::string, std::pair<Real, Real>>> read_points(const fs::path& dir) {
  std::vector<std::pair<std::string, std::pair<Real, Real>>> out;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const ResultPoint p = result_point_from_json(read_json_file(f.string()), f.string());
    out.push_back({p.label.empty() ? f.stem().string() : p.label, {p.bitops, p.accuracy}});
  }
  return out;
}

int cmd_report(const std::string& run_dir, const std::string& out) {
  Run run = open_run(run_dir, "");
  const std::string dest = out.empty() ? run.dir : out;
  std::ifstream pi_in(in_dir(run.dir, "evolution.csv"));
  std::ifstream ep_in(in_dir(run.dir, "epochs.csv"));
  if (!pi_in || !ep_in) throw ConfigError(run.dir + " lacks evolution.csv/epochs.csv; run search first");
  const auto pi = EvolutionLog::read_pi_csv(pi_in);
  const auto epochs = EvolutionLog::read_epochs_csv(ep_in);

  const Network net = make_search_model(run.cfg.network(), run.cfg.search);
  std::vector<std::vector<int>> wbits, abits;
  std::vector<std::string> names;
  for (const auto& s : net.searchable()) {
    wbits.push_back(s.layer->pool().weight_bits);
    abits.push_back(s.layer->pool().activation_bits);
    names.push_back(s.name);
  }
  write_text_file(in_dir(dest, "alpha.svg"), report::evolution_svg(pi, QuantizerKind::weight, wbits, names));
  write_text_file(in_dir(dest, "beta.svg"), report::evolution_svg(pi, QuantizerKind::activation, abits, names));
  const auto mixed = read_points(fs::path(run.dir) / "results");
  const auto baselines = read_points(fs::path(run.dir) / "baselines");
  if (!mixed.empty() && baselines.empty()) {
    throw ConfigError("retrained results found without uniform baselines; run retrain --baselines first");
  }
  write_text_file(in_dir(dest, "summary.svg"), report::summary_svg(epochs, mixed, baselines));
  write_manifest(run, "report");
  std::cout << "wrote alpha.svg, beta.svg, summary.svg to " << dest << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_args.assign(argv, argv + argc);
  CLI::App app{"edmips: differentiable mixed-precision network search"};
  app.require_subcommand(1);

  std::string config, run, out, arch, mode = "wta", uniform, bits, checkpoint;
  std::optional<double> eta;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::size_t trials = 50, layer = 0;
  std::uint64_t sample_seed = 0;
  bool baselines = false;

  auto* s = app.add_subcommand("search", "run the joint weight/architecture search");
  s->add_option("--config", config, "experiment config (JSON)")->required();
  s->add_option("--eta", eta, "complexity multiplier, overrides the config");
  s->add_option("--seed", seed, "seed, overrides the config");
  s->add_option("--epochs", epochs, "search epochs, overrides the config");
  s->add_option("--out", out, "run directory, overrides output_dir");

  auto* d = app.add_subcommand("discretize", "pick bit-widths from a searched model");
  d->add_option("--run", run, "run directory")->required();
  d->add_option("--mode", mode, "wta or sample")->check(CLI::IsMember({"wta", "sample"}));
  d->add_option("--trials", trials, "multinomial trials for --mode sample");
  d->add_option("--seed", sample_seed, "seed for --mode sample");
  d->add_option("--out", out, "architecture file (default RUN/architecture.json)");

  auto* r = app.add_subcommand("retrain", "train a fixed-precision network from scratch");
  r->add_option("--run", run, "run directory");
  r->add_option("--config", config, "experiment config, when there is no run directory");
  r->add_option("--arch", arch, "architecture file");
  r->add_option("--uniform", uniform, "uniform bit-widths W,A");
  r->add_flag("--baselines", baselines, "also train the uniform-precision baselines");
  r->add_option("--epochs", epochs, "retrain epochs, overrides the config");
  r->add_option("--seed", seed, "seed, overrides the config");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  e->add_option("--run", run, "run directory");
  e->add_option("--config", config, "experiment config, when there is no run directory");
  e->add_option("--checkpoint", checkpoint, "checkpoint (default RUN/search.ckpt)");
  e->add_option("--arch", arch, "architecture of a retrained checkpoint");
  e->add_option("--out", out, "result file (default RUN/eval.json)");

  auto* v = app.add_subcommand("sensitivity", "retrain with one layer's bit-widths changed");
  v->add_option("--run", run, "run directory");
  v->add_option("--config", config, "experiment config, when there is no run directory");
  v->add_option("--arch", arch, "base architecture file")->required();
  v->add_option("--layer", layer, "searchable layer index")->required();
  v->add_option("--bits", bits, "bumped bit-widths W,A")->required();
  v->add_option("--out", out, "result file");

  auto* p = app.add_subcommand("report", "render SVG plots for a run");
  p->add_option("--run", run, "run directory")->required();
  p->add_option("--out", out, "output directory (default RUN)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (s->parsed()) return cmd_search(config, eta, seed, epochs, out);
    if (d->parsed()) return cmd_discretize(run, mode, trials, sample_seed, out);
    if (r->parsed()) return cmd_retrain(run, config, arch, uniform, baselines, epochs, seed);
    if (e->parsed()) return cmd_eval(run, config, checkpoint, arch, out);
    if (v->parsed()) return cmd_sensitivity(run, config, arch, layer, bits, out);
    if (p->parsed()) return cmd_report(run, out);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const NumericalError& ex) {
    std::cerr << "numerical abort: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
