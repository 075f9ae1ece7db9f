#include <doctest.h>

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <string>

#include "flowdet/config.hpp"
#include "flowdet/coupling.hpp"
#include "flowdet/error.hpp"
#include "flowdet/priors.hpp"

using namespace flowdet;

namespace {

std::string write_temp(const std::string& name, const std::string& body) {
  const std::string path = "/tmp/flowdet_test_" + name;
  std::ofstream out(path);
  out << body;
  return path;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults cover the schema and validate clean") {
  const RunConfig cfg = default_config();
  CHECK(cfg.values.size() == config_schema().size());
  std::set<std::string> names;
  for (const auto& key : config_schema()) {
    CHECK(cfg.values.count(key.name) == 1);
    CHECK(names.insert(key.name).second);  // no duplicate schema rows
  }
  CHECK_NOTHROW(validate_config(cfg));
  CHECK(cfg.get_int("seed") == 0);
  CHECK(cfg.get_int("n_stages") == 2);
  CHECK(cfg.get_double("train.lr") == doctest::Approx(2.5e-4));
  CHECK(cfg.get_bool("ensemble") == true);
  CHECK(cfg.get_str("solver.kind") == "euler");
  CHECK(cfg.get_str("prior.kind") == "gauss");
}

TEST_CASE("typed accessors reject mismatched values") {
  RunConfig cfg = default_config();
  CHECK_THROWS_AS(cfg.get_int("prior.kind"), Error);      // "gauss"
  CHECK_THROWS_AS(cfg.get_double("match.strategy"), Error);
  CHECK_THROWS_AS(cfg.get_bool("train.lr"), Error);
  CHECK_THROWS_AS(cfg.get_str("no.such.key"), Error);
  cfg.values["seed"] = "12x";
  CHECK_THROWS_AS(cfg.get_int("seed"), Error);
  cfg.values["seed"] = "123";
  CHECK(cfg.get_int("seed") == 123);
}

TEST_CASE("config file parsing") {
  SUBCASE("comments, blanks, and whitespace around '='") {
    const std::string path = write_temp("ok.cfg",
                                        "# a comment\n"
                                        "\n"
                                        "  seed = 42   # trailing comment\n"
                                        "train.lr=1e-3\n"
                                        "prior.kind = dependent\n");
    const RunConfig cfg = load_config_file(path);
    CHECK(cfg.get_int("seed") == 42);
    CHECK(cfg.get_double("train.lr") == doctest::Approx(1e-3));
    CHECK(cfg.get_str("prior.kind") == "dependent");
    // untouched keys keep their defaults
    CHECK(cfg.get_int("n_train") == 64);
    std::remove(path.c_str());
  }
  SUBCASE("all violations reported in one error") {
    const std::string path = write_temp("bad.cfg",
                                        "seed = 1\n"
                                        "no_such_key = 5\n"
                                        "just a line\n"
                                        "other.unknown = 7\n");
    const std::string msg = message_of([&] { load_config_file(path); });
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("no_such_key") != std::string::npos);
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("expected key=value") != std::string::npos);
    CHECK(msg.find("line 4") != std::string::npos);
    std::remove(path.c_str());
  }
  SUBCASE("missing file raises IoError") {
    try {
      load_config_file("/tmp/flowdet_no_such_file.cfg");
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::IoError);
    }
  }
}

TEST_CASE("overrides") {
  RunConfig cfg = default_config();
  apply_overrides(cfg, {"train.steps=77", " n_eval = 8 "});
  CHECK(cfg.get_int("train.steps") == 77);
  CHECK(cfg.get_int("n_eval") == 8);

  const std::string msg = message_of(
      [&] { apply_overrides(cfg, {"bogus.key=1", "noequals"}); });
  CHECK(msg.find("bogus.key") != std::string::npos);
  CHECK(msg.find("noequals") != std::string::npos);
  // failed batch leaves previously-applied values alone
  CHECK(cfg.get_int("train.steps") == 77);
}

TEST_CASE("environment seed override") {
  RunConfig cfg = default_config();
  setenv("FLOWDET_SEED", "9001", 1);
  apply_env_seed(cfg);
  CHECK(cfg.get_int("seed") == 9001);
  unsetenv("FLOWDET_SEED");
  cfg.values["seed"] = "5";
  apply_env_seed(cfg);  // no env set: untouched
  CHECK(cfg.get_int("seed") == 5);
}

TEST_CASE("validation collects every violation into one error") {
  RunConfig cfg = default_config();
  cfg.values["scene.channels"] = "0";        // must be >= 1
  cfg.values["train.lr"] = "-1";             // must be > 0
  cfg.values["prior.kind"] = "banana";       // bad enum
  cfg.values["decoder.time_dim"] = "3";      // must be even
  cfg.values["scene.min_objects"] = "9";     // exceeds max_objects=4
  cfg.values["nms_iou"] = "1.5";             // outside [0,1]
  const std::string msg = message_of([&] { validate_config(cfg); });
  for (const char* want :
       {"scene.channels", "train.lr", "prior.kind", "banana",
        "decoder.time_dim", "scene.min_objects", "nms_iou"})
    CHECK(msg.find(want) != std::string::npos);

  SUBCASE("missing and unknown keys") {
    RunConfig broken = default_config();
    broken.values.erase("top_k");
    broken.values["mystery"] = "1";
    const std::string m2 = message_of([&] { validate_config(broken); });
    CHECK(m2.find("missing key 'top_k'") != std::string::npos);
    CHECK(m2.find("unknown key 'mystery'") != std::string::npos);
  }
  SUBCASE("type violations surface before range checks") {
    RunConfig broken = default_config();
    broken.values["train.steps"] = "many";
    broken.values["ensemble"] = "yep";
    const std::string m3 = message_of([&] { validate_config(broken); });
    CHECK(m3.find("not an integer") != std::string::npos);
    CHECK(m3.find("not a bool") != std::string::npos);
  }
}

TEST_CASE("config hash is stable and value-sensitive") {
  const RunConfig a = default_config();
  const std::string h1 = config_hash(a);
  const std::string h2 = config_hash(a);
  CHECK(h1 == h2);
  CHECK(!h1.empty());
  for (char c : h1) CHECK(std::isxdigit(static_cast<unsigned char>(c)));

  RunConfig b = default_config();
  b.values["seed"] = "1";
  CHECK(config_hash(b) != h1);
  b.values["seed"] = "0";
  CHECK(config_hash(b) == h1);
}

TEST_CASE("converters carry values into module configs") {
  RunConfig cfg = default_config();
  apply_overrides(cfg, {"scene.height=32", "scene.width=48", "scene.classes=5",
                        "scene.noise_std=0.2", "n_stages=3", "decoder.pooled=6",
                        "decoder.hidden=96", "match.strategy=hung_c",
                        "prior.kind=derived_bucketed", "objective=ddpm",
                        "train.batch_size=2", "train.steps=123", "top_k=7",
                        "solver.kind=rk4", "steps=4", "n_eval=16",
                        "ensemble=false", "ddpm.timesteps=500"});
  validate_config(cfg);

  const SceneConfig sc = to_scene_config(cfg);
  CHECK(sc.height == 32);
  CHECK(sc.width == 48);
  CHECK(sc.num_classes == 5);
  CHECK(sc.noise_std == doctest::Approx(0.2));

  const TrainConfig tc = to_train_config(cfg);
  CHECK(tc.decoder.n_stages == 3);
  CHECK(tc.decoder.pooled == 6);
  CHECK(tc.decoder.hidden == 96);
  CHECK(tc.decoder.num_classes == 5);
  CHECK(tc.strategy == MatchStrategy::HungC);
  CHECK(tc.prior_kind == PriorKind::DerivedSizeBucketed);
  CHECK(tc.objective == "ddpm");
  CHECK(tc.batch_size == 2);
  CHECK(tc.total_steps == 123);
  CHECK(tc.weights.top_k == 7);
  CHECK(tc.ddpm_timesteps == 500);

  const SamplerConfig smp = to_sampler_config(cfg);
  CHECK(smp.solver == SolverKind::Rk4);
  CHECK(smp.steps == 4);
  CHECK(smp.n_eval == 16);
  CHECK(smp.ensemble == false);
  CHECK(smp.ddpm_timesteps == 500);
}

}  // TEST_SUITE
