// avg: command-line driver for the generative retrieval pipeline.
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avg/config.hpp"
#include "avg/errors.hpp"
#include "avg/pipeline.hpp"
#include "json.hpp"

namespace {

int fail(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
  return kind == "usage" || kind == "config" ? 2 : 1;
}

std::string list_keys() {
  std::string out;
  for (const auto& k : avg::RunConfig::schema()) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "  %-20s %-12s %s\n", k.name.c_str(), k.default_value.c_str(), k.help.c_str());
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative text-to-image retrieval: tokenize images into voken sequences and generate them from text."};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool quiet = false;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
  app.add_flag("-q,--quiet", quiet, "no progress output");
  app.add_flag_callback("--keys", [] {
    std::cout << list_keys();
    throw CLI::Success();
  }, "list config keys with defaults");

  int image_id = -1;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("overrides", overrides, "key=value overrides (a comma list sweeps)");
    return sub;
  };
  auto* synth = add("synth", "generate (or load) the paired embedding bundle");
  auto* train_tok = add("train-tokenizer", "train the residual-quantized image tokenizer");
  auto* tokenize = add("tokenize", "assign voken sequences to every image");
  auto* train_model = add("train-model", "train the token-to-voken model");
  auto* eval = add("eval", "Recall@K of generative retrieval and the two-tower baseline");
  auto* bench = add("bench", "queries/sec versus corpus size");
  auto* run = add("run", "synth, train-tokenizer, tokenize, train-model and eval in sequence");
  auto* inspect = add("inspect", "print an image's voken sequence and its collision bucket");
  inspect->add_option("--image", image_id, "image id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    avg::RunConfig cfg = config_path.empty() ? avg::RunConfig() : avg::RunConfig::from_file(config_path);
    cfg.apply(overrides);
    if (*seed_opt) cfg.set("seed", std::to_string(seed));
    cfg.validate();
    const avg::pipeline::Logger log = [quiet](const std::string& line) {
      if (!quiet) std::cout << line << std::endl;
    };

    for (const auto& c : cfg.expand_sweeps()) {
      if (cfg.has_sweep()) log("== " + c.out_dir().string());
      if (inspect->parsed()) {
        std::cout << avg::pipeline::stage_inspect(c, image_id);
      } else if (synth->parsed()) {
        avg::pipeline::stage_synth(c, log);
      } else if (train_tok->parsed()) {
        avg::pipeline::stage_train_tokenizer(c, log);
      } else if (tokenize->parsed()) {
        avg::pipeline::stage_tokenize(c, log);
      } else if (train_model->parsed()) {
        avg::pipeline::stage_train_model(c, log);
      } else if (eval->parsed()) {
        avg::pipeline::stage_eval(c, log);
      } else if (bench->parsed()) {
        avg::pipeline::stage_bench(c, log);
      } else if (run->parsed()) {
        avg::pipeline::stage_synth(c, log);
        avg::pipeline::stage_train_tokenizer(c, log);
        avg::pipeline::stage_tokenize(c, log);
        avg::pipeline::stage_train_model(c, log);
        avg::pipeline::stage_eval(c, log);
      }
    }
  } catch (const avg::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
