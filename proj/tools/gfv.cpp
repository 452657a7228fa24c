#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gfv/pipeline.hpp"
#include "gfv/synthetic.hpp"

namespace {

void print_error(const std::string& code, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = code;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
}

void add_common(CLI::App* app, gfv::RunConfig& cfg, bool needs_root = true) {
  auto* root = app->add_option("--root", cfg.root, "Corpus root or run directory");
  if (needs_root) root->required();
  app->add_option("--out", cfg.out, "Output directory")->required();
  app->add_option("--seed", cfg.train.seed, "Master seed")->capture_default_str();
  app->add_option("--country", cfg.countries, "Restrict to these country codes");
}

void add_model(CLI::App* app, gfv::RunConfig& cfg) {
  app->add_option("--resolution", cfg.resolution, "Network input side length")->capture_default_str();
  app->add_option("--manifest", cfg.manifest, "Manifest path (default <root>/manifest.jsonl)");
  app->add_option("--checkpoint", cfg.checkpoint, "Checkpoint path (default <root>/model.ckpt)");
  app->add_option("--pairs", cfg.similar_pairs, "Similar and dissimilar pairs per country")
      ->each([&cfg](const std::string&) { cfg.dissimilar_pairs = cfg.similar_pairs; })
      ->capture_default_str();
  app->add_flag("--per-country-model", cfg.per_country_model, "One model per country");
  app->add_flag("--cross-source", cfg.cross_source, "Allow template/scan pairs");
  app->add_option("--margin", cfg.train.margin, "Contrastive margin")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guilloche-based forgery verification"};
  app.require_subcommand(1);
  gfv::RunConfig cfg;
  cfg.log = [](const std::string& msg) { std::cerr << msg << '\n'; };

  gfv::SyntheticCorpusSpec synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic guilloche corpus");
  synth_cmd->add_option("--out", cfg.out, "Corpus root to create")->required();
  synth_cmd->add_option("--country", synth.countries, "Country codes")->capture_default_str();
  synth_cmd->add_option("--docs", synth.docs_per_country, "Documents per country")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Image side length")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Seed")->capture_default_str();

  auto* forge = app.add_subcommand("forge", "Generate copy-move forgeries and the train/test split");
  add_common(forge, cfg);
  forge->add_option("--block-size", cfg.block_size, "Block side length in pixels")->capture_default_str();
  forge->add_option("--zones-per-doc", cfg.zones_per_doc, "Copy-move operations per document")->capture_default_str();
  forge->add_option("--train-fraction", cfg.train_fraction, "Share of each stratum used for training")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "Train the Siamese network");
  add_common(train, cfg);
  add_model(train, cfg);
  train->add_option("--epochs", cfg.train.epochs, "Training epochs")->capture_default_str();
  train->add_option("--batch-size", cfg.train.batch_size, "Pairs per batch")->capture_default_str();
  train->add_option("--lr", cfg.train.learning_rate, "Learning rate")->capture_default_str();

  std::string calibration_split = "train";
  auto* calibrate = app.add_subcommand("calibrate", "Determine per-country thresholds");
  add_common(calibrate, cfg);
  add_model(calibrate, cfg);
  calibrate->add_option("--split", calibration_split, "Split the calibration pairs come from")
      ->check(CLI::IsMember({"train", "test"}))
      ->capture_default_str();

  double lambda = 0.0;
  auto* eval = app.add_subcommand("eval", "Compute TAR/FAR/FRR and ROC curves on the test split");
  add_common(eval, cfg);
  add_model(eval, cfg);
  eval->add_option("--thresholds", cfg.thresholds, "Threshold table (default <root>/thresholds.json)");
  auto* lambda_opt = eval->add_option("--lambda", lambda, "Use this threshold for every country");

  std::string reference, query, country;
  auto* verify = app.add_subcommand("verify", "Decide whether a query document is genuine");
  verify->add_option("reference", reference, "Genuine reference image")->required();
  verify->add_option("query", query, "Query image")->required();
  verify->add_option("--country", country, "Country code")->required();
  verify->add_option("--thresholds", cfg.thresholds, "Threshold table")->required();
  verify->add_option("--checkpoint", cfg.checkpoint, "Checkpoint")->required();
  verify->add_option("--resolution", cfg.resolution, "Network input side length")->capture_default_str();
  verify->add_flag("--per-country-model", cfg.per_country_model, "Checkpoint directory holds one model per country");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth_cmd) {
      gfv::make_synthetic_corpus(cfg.out, synth);
    } else if (*forge) {
      gfv::cmd_forge(cfg);
    } else if (*train) {
      gfv::cmd_train(cfg);
    } else if (*calibrate) {
      cfg.calibration_split = calibration_split == "test" ? gfv::Split::test : gfv::Split::train;
      gfv::cmd_calibrate(cfg);
    } else if (*eval) {
      if (*lambda_opt) cfg.lambda = lambda;
      gfv::cmd_eval(cfg);
    } else if (*verify) {
      const auto r = gfv::cmd_verify(cfg, country, reference, query);
      std::printf("%s distance=%.17g lambda=%.17g\n", r.genuine ? "GENUINE" : "FORGED", r.distance, r.lambda);
      return r.genuine ? 0 : 2;
    }
  } catch (const gfv::TrainingDiverged& e) {
    if (!cfg.out.empty()) {
      std::filesystem::create_directories(cfg.out);
      e.trace().write_csv(cfg.out / "loss_trace.csv");
    }
    print_error(std::string(gfv::to_string(e.code())), e.what());
    return 1;
  } catch (const gfv::Error& e) {
    print_error(std::string(gfv::to_string(e.code())), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("Internal", e.what());
    return 1;
  }
  return 0;
}
