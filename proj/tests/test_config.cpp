#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "avg/config.hpp"
#include "avg/errors.hpp"
#include "doctest.h"

using namespace avg;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults validate and map onto module configs") {
  RunConfig c;
  c.validate();
  CHECK(c.get_int("codebook_size") == 1024);
  CHECK(c.get_int("voken_length") == 4);
  CHECK(c.tokenizer().codebook_size == 1024);
  CHECK(c.tokenizer().depth == 4);
  CHECK(c.model().d_model == 128);
  CHECK(c.model().layers == 2);
  CHECK(c.retrieve_options().k == 10);
  CHECK(c.synth().num_images == 512);
  // Module seeds are distinct offsets of the run seed.
  std::set<uint64_t> seeds{c.synth().seed, c.tokenizer().seed, c.model().seed, c.joint().seed};
  CHECK(seeds.size() == 4);
}

TEST_CASE("aliases set the long keys") {
  RunConfig c;
  c.apply({"N=256", "M=6", "D=32", "E=3"});
  CHECK(c.get_int("codebook_size") == 256);
  CHECK(c.get_int("voken_length") == 6);
  CHECK(c.get_int("dim") == 32);
  CHECK(c.get_int("layers") == 3);
}

TEST_CASE("unknown keys and bad values are reported together") {
  RunConfig c;
  const auto msg = error_of([&] { c.apply({"bogus=1", "codebook_size=x", "lr=0.01", "also_bogus=2"}); });
  CHECK(msg.find("bogus") != std::string::npos);
  CHECK(msg.find("also_bogus") != std::string::npos);
  CHECK(msg.find("codebook_size") != std::string::npos);
  CHECK(msg.find("lr") == std::string::npos);
  CHECK_THROWS_AS(c.apply({"no_equals_sign"}), ConfigError);
}

TEST_CASE("validate names every offending key") {
  RunConfig c;
  c.apply({"heads=3", "codebook_size=1", "train_frac=0.95"});
  const auto msg = error_of([&] { c.validate(); });
  CHECK(msg.find("heads") != std::string::npos);
  CHECK(msg.find("codebook_size") != std::string::npos);
  CHECK(msg.find("frac") != std::string::npos);

  RunConfig files;
  files.apply({"source=files"});
  CHECK(error_of([&] { files.validate(); }).find("pairs_path") != std::string::npos);

  RunConfig choice;
  CHECK_THROWS_AS(choice.apply({"eval_split=dev"}), ConfigError);
}

TEST_CASE("sweeps expand to the cartesian product with suffixed out dirs") {
  RunConfig c;
  c.apply({"out_dir=runs/x", "codebook_size=64,256", "beam=10,30,50"});
  CHECK(c.has_sweep());
  const auto runs = c.expand_sweeps();
  REQUIRE(runs.size() == 6);
  std::set<std::string> dirs;
  for (const auto& r : runs) {
    CHECK_FALSE(r.has_sweep());
    r.validate();
    dirs.insert(r.get("out_dir"));
  }
  CHECK(dirs.size() == 6);
  CHECK(dirs.count("runs/x_beam=30_codebook_size=256") + dirs.count("runs/x_codebook_size=256_beam=30") == 1);
  CHECK_THROWS_AS(c.get_int("beam"), ConfigError);
}

TEST_CASE("fingerprint follows the resolved values") {
  RunConfig a, b;
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint().size() == 16);
  b.set("seed", "2");
  CHECK(a.fingerprint() != b.fingerprint());
  b.set("seed", "1");
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.resolved().find("codebook_size=1024\n") != std::string::npos);
}

TEST_CASE("config files skip comments and blank lines") {
  const auto path = std::filesystem::temp_directory_path() / "avg_config_test.cfg";
  {
    std::ofstream out(path);
    out << "# desk run\n\ncodebook_size = 256\nseed=7  \n";
  }
  const auto c = RunConfig::from_file(path);
  CHECK(c.get_int("codebook_size") == 256);
  CHECK(c.get_uint("seed") == 7);
  CHECK_THROWS_AS(RunConfig::from_file(path.string() + ".missing"), DependencyError);
  std::filesystem::remove(path);
}

TEST_CASE("relative out_dir resolves against AVG_OUT_ROOT") {
  RunConfig c;
  c.set("out_dir", "runs/a");
  ::setenv("AVG_OUT_ROOT", "/tmp/avg_root", 1);
  CHECK(c.out_dir() == std::filesystem::path("/tmp/avg_root/runs/a"));
  c.set("out_dir", "/abs/dir");
  CHECK(c.out_dir() == std::filesystem::path("/abs/dir"));
  ::unsetenv("AVG_OUT_ROOT");
}
