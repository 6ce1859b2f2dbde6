#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "edmips/config.hpp"
#include "edmips/io.hpp"
#include "edmips/report.hpp"

using namespace edmips;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// smallcnn on a small synthetic set, two epochs each way
json small_config(const std::string& out) {
  ExperimentConfig c;
  c.model = {"smallcnn", 4, 4};
  c.dataset = {SyntheticSource{4, {1, 28, 28}, 96, 3, 0.5, 2}, {}, {}, 64, 32, 3};
  c.search.search_epochs = 2;
  c.search.retrain_epochs = 1;
  c.search.batch_size = 32;
  c.search.eta = 0.01;
  c.output_dir = out;
  return to_json(c);
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("edmips_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(EDMIPS_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

// ------------------------------------------------------------------ config

TEST(Config, RoundTripAndStableHash) {
  const json j = small_config("somewhere");
  const ExperimentConfig c = config_from_json(j);
  EXPECT_EQ(to_json(c), j);
  EXPECT_EQ(config_hash(c), config_hash(config_from_json(to_json(c))));
  EXPECT_EQ(config_hash(c).size(), 16u);
  ExperimentConfig d = c;
  d.search.eta = 0.02;
  EXPECT_NE(config_hash(c), config_hash(d));
}

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = parse_config("{}");
  EXPECT_EQ(c.model.name, "smallcnn");
  EXPECT_EQ(c.search.search_epochs, 25u);
  EXPECT_EQ(c.search.retrain_decay_every, 15u);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse_config(R"({"sarch": {}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"search": {"etta": 1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": {"name": "smallcnn", "depth": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"dataset": {"source": "synthetic", "colour": 1}})"), ConfigError);
  try {
    parse_config(R"({"search": {"etta": 1}})");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("etta"), std::string::npos);
  }
}

TEST(Config, BadValuesRejected) {
  for (const char* text : {
           R"({"schema": "edmips.config/9"})",
           R"({"search": {"eta": -1}})",
           R"({"search": {"eta": "big"}})",
           R"({"search": {"search_epochs": 2.5}})",
           R"({"search": {"search_epochs": -3}})",
           R"({"search": {"mode": "sometimes"}})",
           R"({"search": {"weight_bits": [0, 2]}})",
           R"({"model": {"name": "vgg"}})",
           R"({"model": {"num_classes": 4}})",  // dataset still has 10 classes
           R"({"dataset": {"source": "idx"}})",
           R"({"dataset": {"mean": [0.5]}})",
           "{not json",
       }) {
    EXPECT_THROW(parse_config(text), ConfigError) << text;
  }
}

TEST(Config, ShippedExamplesParse) {
  for (const char* name : {"smallcnn.json", "resnet_desk.json"}) {
    const ExperimentConfig c = load_config(std::string(EDMIPS_CONFIG_DIR) + "/" + name);
    EXPECT_NO_THROW(build_model(c.network(), SearchBuild{c.search.pool}, 0)) << name;
    EXPECT_EQ(std::get<SyntheticSource>(c.dataset.source).dims, c.network().input_shape) << name;
  }
}

// ------------------------------------------------------------ architecture

TEST(ArchitectureFile, RoundTripWithCost) {
  const auto net = build_model(smallcnn(4, 4), SearchBuild{}, 0);
  Architecture a{{{0, 3, 2}, {1, 1, 4}, {2, 4, 4}}};
  const json j = architecture_to_json(a, net);
  EXPECT_EQ(j["schema"], "edmips.architecture/1");
  EXPECT_EQ(j["layers"][1]["name"], "conv2");
  EXPECT_EQ(j["total_bitops"].get<Real>(), net.complexity(0).discrete_bitops(a.bit_pairs()));
  EXPECT_EQ(architecture_from_json(json::parse(j.dump())), a);
}

TEST(ArchitectureFile, MalformedRejected) {
  EXPECT_THROW(architecture_from_json(json::object()), ConfigError);
  EXPECT_THROW(architecture_from_json({{"schema", "edmips.architecture/1"}}), ConfigError);
  EXPECT_THROW(architecture_from_json(json::parse(R"({"schema":"edmips.architecture/1","layers":[{"layer_id":0,"weight_bits":-2,"activation_bits":2}]})")),
               ConfigError);
}

TEST(Manifest, RecordsHashSeedAndVersion) {
  const ExperimentConfig c = config_from_json(small_config("x"));
  const json m = make_manifest("search", c, {"edmips", "search"});
  EXPECT_EQ(m["schema"], "edmips.manifest/1");
  EXPECT_EQ(m["config_hash"], config_hash(c));
  EXPECT_EQ(m["seed"], c.search.seed);
  EXPECT_FALSE(m["code_version"].get<std::string>().empty());
  EXPECT_EQ(config_from_json(m["config"]).search.eta, c.search.eta);
}

// ------------------------------------------------------------------ report

TEST(Report, EvolutionPanelsPerLayer) {
  std::vector<PiRecord> recs;
  for (std::size_t e = 1; e <= 3; ++e) {
    for (std::size_t l = 0; l < 2; ++l) {
      recs.push_back({e, l, QuantizerKind::weight, {0.25, 0.25, 0.25, 0.25}});
      recs.push_back({e, l, QuantizerKind::activation, {0.2, 0.3, 0.5}});
    }
  }
  const std::string svg =
      report::evolution_svg(recs, QuantizerKind::activation, {{2, 3, 4}, {2, 3, 4}}, {"a<1>", "b"});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("A4"), std::string::npos);
  EXPECT_NE(svg.find("a&lt;1&gt;"), std::string::npos);
  EXPECT_NE(svg.find("layer 1 b"), std::string::npos);
  EXPECT_THROW(report::evolution_svg({}, QuantizerKind::weight, {}), Error);
}

TEST(Report, SummaryNeedsBaselinesForMixedPoints) {
  std::vector<EpochRecord> ep{{1, 2.0, 0.3, 5, 0.1, 0.01}, {2, 1.5, 0.5, 4, 0.1, 0.01}};
  const std::vector<std::pair<std::string, std::pair<Real, Real>>> mixed{{"eta0.01", {3e6, 0.9}}};
  const std::vector<std::pair<std::string, std::pair<Real, Real>>> base{{"W2A2", {2e6, 0.85}},
                                                                         {"W4A4", {8e6, 0.93}}};
  EXPECT_THROW(report::summary_svg(ep, mixed, {}), Error);
  const std::string svg = report::summary_svg(ep, mixed, base);
  EXPECT_NE(svg.find("BitOps"), std::string::npos);
  EXPECT_NE(svg.find("eta0.01"), std::string::npos);
  EXPECT_NE(report::summary_svg(ep, {}, {}).find("expected normalized cost"), std::string::npos);
}

// --------------------------------------------------------------------- CLI

TEST(Cli, FullPipelineWritesArtifactsAndManifests) {
  const fs::path dir = scratch("pipeline");
  const fs::path run = dir / "run";
  write(dir / "cfg.json", small_config(run.string()).dump(2));
  const fs::path log = dir / "log.txt";
  ASSERT_EQ(cli("search --config " + (dir / "cfg.json").string(), log), 0) << slurp(log);
  for (const char* f : {"config.json", "manifest.search.json", "evolution.csv", "epochs.csv", "cost_report.csv",
                        "quantizers.csv", "search.ckpt", "search_result.json"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }
  EXPECT_EQ(slurp(run / "quantizers.csv").rfind("# schema=edmips.quantizer_table/1", 0), 0u);
  std::ifstream pi(run / "evolution.csv");
  EXPECT_EQ(EvolutionLog::read_pi_csv(pi).size(), 2u * 3 * 2);

  ASSERT_EQ(cli("discretize --run " + run.string(), log), 0) << slurp(log);
  const Architecture arch = load_architecture((run / "architecture.json").string());
  EXPECT_EQ(arch.layers.size(), 3u);
  ASSERT_EQ(cli("discretize --run " + run.string() + " --mode sample --trials 20 --out " +
                    (run / "sampled.json").string(),
                log),
            0)
      << slurp(log);

  ASSERT_EQ(cli("retrain --run " + run.string() + " --arch " + (run / "architecture.json").string(), log), 0)
      << slurp(log);
  EXPECT_TRUE(fs::exists(run / "results/architecture.json"));
  EXPECT_TRUE(fs::exists(run / "results/architecture.ckpt"));
  // mixed results without baselines: the report refuses
  EXPECT_EQ(cli("report --run " + run.string(), log), 2) << slurp(log);
  ASSERT_EQ(cli("retrain --run " + run.string() + " --baselines", log), 0) << slurp(log);
  for (const char* b : {"W2A2", "W3A3", "W4A4"}) EXPECT_TRUE(fs::exists(run / "baselines" / (std::string(b) + ".json")));
  ASSERT_EQ(cli("report --run " + run.string(), log), 0) << slurp(log);
  for (const char* f : {"alpha.svg", "beta.svg", "summary.svg", "manifest.discretize.json",
                        "manifest.retrain.json", "manifest.report.json"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }

  ASSERT_EQ(cli("eval --run " + run.string() + " --arch " + (run / "architecture.json").string() +
                    " --checkpoint " + (run / "results/architecture.ckpt").string() + " --out " +
                    (run / "eval_retrained.json").string(),
                log),
            0)
      << slurp(log);
  const json retrained = read_json_file((run / "results/architecture.json").string());
  const json evaled = read_json_file((run / "eval_retrained.json").string());
  EXPECT_EQ(evaled["accuracy"], retrained["accuracy"]);
  EXPECT_EQ(evaled["bitops"], retrained["bitops"]);

  ASSERT_EQ(cli("sensitivity --run " + run.string() + " --arch " + (run / "architecture.json").string() +
                    " --layer 0 --bits 4,4",
                log),
            0)
      << slurp(log);
  const json sens = read_json_file((run / "sensitivity_layer0.json").string());
  EXPECT_EQ(sens["delta_bitops"].get<Real>(), sens["bumped_bitops"].get<Real>() - sens["base_bitops"].get<Real>());

  const json manifest = read_json_file((run / "manifest.search.json").string());
  EXPECT_EQ(manifest["config_hash"], config_hash(load_config((run / "config.json").string())));
  fs::remove_all(dir);
}

TEST(Cli, SameSeedSameEvolutionBytes) {
  const fs::path dir = scratch("determinism");
  write(dir / "cfg.json", small_config((dir / "a").string()).dump());
  const fs::path log = dir / "log.txt";
  ASSERT_EQ(cli("search --config " + (dir / "cfg.json").string() + " --epochs 1", log), 0) << slurp(log);
  ASSERT_EQ(cli("search --config " + (dir / "cfg.json").string() + " --epochs 1 --out " + (dir / "b").string(), log),
            0);
  EXPECT_EQ(slurp(dir / "a/evolution.csv"), slurp(dir / "b/evolution.csv"));
  EXPECT_EQ(slurp(dir / "a/search.ckpt"), slurp(dir / "b/search.ckpt"));
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("exit");
  const fs::path log = dir / "log.txt";
  write(dir / "bad.json", R"({"search": {"etta": 1}})");
  EXPECT_EQ(cli("search --config " + (dir / "bad.json").string(), log), 2);
  EXPECT_NE(slurp(log).find("etta"), std::string::npos);
  EXPECT_EQ(cli("search --config " + (dir / "missing.json").string(), log), 2);
  EXPECT_EQ(cli("frobnicate", log), 2);
  write(dir / "cfg.json", small_config((dir / "run").string()).dump());
  EXPECT_EQ(cli("search --config " + (dir / "cfg.json").string() + " --eta -1", log), 2);
  EXPECT_EQ(cli("discretize --run " + (dir / "nowhere").string(), log), 2);

  // a huge step sends the weights to infinity; the next forward is NaN
  json diverge = small_config((dir / "nan").string());
  diverge["search"]["lr_weights"] = 1e300;
  write(dir / "nan.json", diverge.dump());
  EXPECT_EQ(cli("search --config " + (dir / "nan.json").string(), log), 3) << slurp(log);
  EXPECT_NE(slurp(log).find("tape node"), std::string::npos) << slurp(log);
  fs::remove_all(dir);
}
