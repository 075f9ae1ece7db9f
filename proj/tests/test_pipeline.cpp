#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "flowdet/config.hpp"
#include "flowdet/error.hpp"
#include "flowdet/pipeline.hpp"

using namespace flowdet;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path("/tmp") / ("flowdet_pl_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small enough to train in milliseconds but structurally complete.
RunConfig tiny_config() {
  RunConfig cfg = default_config();
  apply_overrides(
      cfg, {"scene.channels=2", "scene.height=16", "scene.width=16",
            "scene.classes=2", "scene.max_objects=2", "scene.min_size=0.2",
            "scene.max_size=0.6", "data.train_scenes=6", "data.val_scenes=3",
            "n_train=8", "n_stages=1", "decoder.pooled=2", "decoder.hidden=8",
            "decoder.time_dim=4", "decoder.ffn=12", "train.batch_size=2",
            "train.steps=8", "train.warmup=2", "train.eval_every=4",
            "train.log_every=0", "eval.scenes=2", "n_eval=4", "steps=1"});
  validate_config(cfg);
  return cfg;
}

bool scenes_equal(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id) return false;
  if (a.raster.values != b.raster.values) return false;
  if (a.gt_classes != b.gt_classes) return false;
  if (a.gt_boxes.size() != b.gt_boxes.size()) return false;
  for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) {
    if (a.gt_boxes[i].cx != b.gt_boxes[i].cx) return false;
    if (a.gt_boxes[i].cy != b.gt_boxes[i].cy) return false;
    if (a.gt_boxes[i].w != b.gt_boxes[i].w) return false;
    if (a.gt_boxes[i].h != b.gt_boxes[i].h) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("scene stream seeds are deterministic and well separated") {
  CHECK(scene_stream_seed(7, kDataTrainSalt, 0) ==
        scene_stream_seed(7, kDataTrainSalt, 0));
  std::set<std::uint64_t> seen;
  for (std::uint64_t seed : {0u, 1u, 7u})
    for (std::uint64_t salt : {kDataTrainSalt, kDataValSalt, kEvalSalt})
      for (std::int64_t idx : {0, 1, 2, 100})
        seen.insert(scene_stream_seed(seed, salt, idx));
  CHECK(seen.size() == 3u * 3u * 4u);
}

TEST_CASE("make_scenes ids, determinism, and split independence") {
  const RunConfig cfg = tiny_config();
  const SceneConfig scfg = to_scene_config(cfg);
  const auto a = make_scenes(scfg, 3, kDataTrainSalt, 4);
  const auto b = make_scenes(scfg, 3, kDataTrainSalt, 4);
  REQUIRE(a.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(a[i].scene_id == i);
    CHECK(scenes_equal(a[i], b[i]));
  }
  // Prefix property: a longer run reproduces the shorter one's scenes.
  const auto longer = make_scenes(scfg, 3, kDataTrainSalt, 6);
  for (int i = 0; i < 4; ++i) CHECK(scenes_equal(a[i], longer[i]));
  const auto val = make_scenes(scfg, 3, kDataValSalt, 4);
  CHECK(!scenes_equal(a[0], val[0]));
}

TEST_CASE("gen-data writes byte-identical datasets and round-trips") {
  const RunConfig cfg = tiny_config();
  const fs::path d1 = fresh_dir("gen1");
  const fs::path d2 = fresh_dir("gen2");
  const GenDataResult r1 = run_gen_data(cfg, d1.string());
  const GenDataResult r2 = run_gen_data(cfg, d2.string());
  CHECK(r1.n_train == 6);
  CHECK(r1.n_val == 3);
  CHECK(r1.config_hash == config_hash(cfg));
  CHECK(slurp(r1.train_path) == slurp(r2.train_path));
  CHECK(slurp(r1.val_path) == slurp(r2.val_path));

  const Dataset train = read_dataset(r1.train_path);
  CHECK(train.num_classes == 2);
  CHECK(train.config_hash == r1.config_hash);
  REQUIRE(train.scenes.size() == 6);
  const auto direct = make_scenes(to_scene_config(cfg),
                                  static_cast<std::uint64_t>(cfg.get_int("seed")),
                                  kDataTrainSalt, 6);
  for (int i = 0; i < 6; ++i) CHECK(scenes_equal(train.scenes[i], direct[i]));

  // A different seed must produce different bytes.
  RunConfig other = cfg;
  other.values["seed"] = "1";
  const fs::path d3 = fresh_dir("gen3");
  const GenDataResult r3 = run_gen_data(other, d3.string());
  CHECK(slurp(r1.train_path) != slurp(r3.train_path));
}

TEST_CASE("fit_model is deterministic and advances the step counter") {
  const RunConfig cfg = tiny_config();
  const TrainConfig tc = to_train_config(cfg);
  const auto scenes = make_scenes(to_scene_config(cfg), tc.seed,
                                  kDataTrainSalt, 6);

  TrainedModel m1 = init_model(tc, scenes);
  TrainedModel m2 = init_model(tc, scenes);
  FitHooks quiet;
  const StepMetrics s1 = fit_model(scenes, tc, m1.params, m1.prior, quiet);
  const StepMetrics s2 = fit_model(scenes, tc, m2.params, m2.prior, quiet);
  CHECK(m1.params.step_count() == 8);
  CHECK(s1.total == s2.total);
  CHECK(s1.grad_norm == s2.grad_norm);
  CHECK(std::isfinite(s1.total));
  for (const auto& [name, p] : m1.params.entries())
    CHECK(p.value.values == m2.params.at(name).value.values);

  // Hooks fire on schedule: eval_every=3 over 8 steps -> steps 3, 6, 8.
  TrainedModel m3 = init_model(tc, scenes);
  std::vector<std::int64_t> fired;
  FitHooks hooks;
  hooks.eval_every = 3;
  hooks.on_eval = [&](std::int64_t step) { fired.push_back(step); };
  fit_model(scenes, tc, m3.params, m3.prior, hooks);
  CHECK(fired == std::vector<std::int64_t>({3, 6, 8}));

  CHECK_THROWS_AS(fit_model({}, tc, m1.params, m1.prior, quiet), Error);
}

TEST_CASE("evaluate_model reports sane diagnostics") {
  const RunConfig cfg = tiny_config();
  const TrainConfig tc = to_train_config(cfg);
  const auto scenes = make_scenes(to_scene_config(cfg), tc.seed,
                                  kDataValSalt, 3);
  TrainedModel model = init_model(tc, scenes);
  const SamplerConfig scfg = to_sampler_config(cfg);

  const EvalRunResult all =
      evaluate_model(scenes, model.params, tc.decoder, model.prior, scfg, 0);
  CHECK(all.n_scenes == 3);
  CHECK(all.mean_nfe > 0.0);
  CHECK(all.ms_per_scene > 0.0);
  const EvalRunResult capped =
      evaluate_model(scenes, model.params, tc.decoder, model.prior, scfg, 0, 2);
  CHECK(capped.n_scenes == 2);
  // Per-scene seeding keys off scene_id, so the shared prefix is identical.
  const EvalRunResult again =
      evaluate_model(scenes, model.params, tc.decoder, model.prior, scfg, 0, 2);
  CHECK(capped.eval.ap50 == again.eval.ap50);
  CHECK(capped.mean_nfe == again.mean_nfe);
}

TEST_CASE("run_train end-to-end and resume equivalence") {
  const RunConfig cfg = tiny_config();
  const fs::path data = fresh_dir("train_data");
  run_gen_data(cfg, data.string());

  // Uninterrupted reference: 8 steps in one go; a second identical run must
  // reproduce the checkpoint byte for byte.
  const fs::path out_a = fresh_dir("train_a");
  const TrainRunResult a = run_train(cfg, data.string(), out_a.string());
  CHECK(a.steps_run == 8);
  CHECK(a.has_eval);
  REQUIRE(fs::exists(a.checkpoint_path));
  const fs::path out_a2 = fresh_dir("train_a2");
  const TrainRunResult a2 = run_train(cfg, data.string(), out_a2.string());
  CHECK(slurp(a.checkpoint_path) == slurp(a2.checkpoint_path));

  // Interrupted run under the *same* config: drive the first 5 steps exactly
  // the way fit_model draws its batches, checkpoint, reload, and let
  // fit_model finish 5..8. The result must match the one-shot run bitwise.
  // (Lowering train.steps for the first leg would instead change the lr
  // schedule, which is derived from the total.)
  const TrainConfig tc = to_train_config(cfg);
  const auto scenes = make_scenes(to_scene_config(cfg), tc.seed,
                                  kDataTrainSalt, 6);
  TrainedModel split = init_model(tc, scenes);
  for (std::int64_t step = 0; step < 5; ++step) {
    Rng pick = Rng::child(tc.seed, kBatchSalt, step);
    std::vector<const Scene*> batch;
    for (int b = 0; b < tc.batch_size; ++b)
      batch.push_back(
          &scenes[pick.uniform_int(static_cast<int>(scenes.size()))]);
    train_step(batch, split.params, split.prior, tc, step);
  }
  Checkpoint mid;
  mid.config = cfg.values;
  mid.prior = split.prior;
  mid.params = split.params;
  mid.objective = tc.objective;
  const fs::path mid_path = fresh_dir("train_mid") / "checkpoint.json";
  save_checkpoint(mid, mid_path.string());
  Checkpoint resumed = load_checkpoint(mid_path.string());
  CHECK(resumed.params.step_count() == 5);
  FitHooks quiet;
  fit_model(scenes, tc, resumed.params, resumed.prior, quiet);

  TrainedModel oneshot = init_model(tc, scenes);
  fit_model(scenes, tc, oneshot.params, oneshot.prior, quiet);
  for (const auto& [name, p] : oneshot.params.entries()) {
    const auto& other = resumed.params.at(name);
    CHECK(p.value.values == other.value.values);
    CHECK(p.moment1 == other.moment1);
    CHECK(p.moment2 == other.moment2);
  }

  // run_train accepts a resume checkpoint and continues to the configured
  // total (here: a finished run simply passes through with no extra steps).
  const fs::path out_r = fresh_dir("train_r");
  const TrainRunResult r =
      run_train(cfg, data.string(), out_r.string(), a.checkpoint_path);
  CHECK(r.steps_run == 8);

  // Mismatched class count is rejected.
  RunConfig wrong = cfg;
  wrong.values["scene.classes"] = "3";
  const fs::path out_c = fresh_dir("train_c");
  CHECK_THROWS_AS(run_train(wrong, data.string(), out_c.string()), Error);
}

TEST_CASE("run_eval writes a parseable report") {
  const RunConfig cfg = tiny_config();
  const fs::path data = fresh_dir("eval_data");
  run_gen_data(cfg, data.string());
  const fs::path out = fresh_dir("eval_run");
  const TrainRunResult tr = run_train(cfg, data.string(), out.string());

  const std::string report = (out / "report.json").string();
  const EvalRunResult r = run_eval(cfg, tr.checkpoint_path,
                                   (data / "val.jsonl").string(), report);
  CHECK(r.n_scenes == 2);  // eval.scenes=2 cap
  const json j = json::parse(slurp(report));
  CHECK(j.contains("ap"));
  CHECK(j.contains("ap50"));
  CHECK(j.contains("recall"));
  CHECK(j["config_hash"] == config_hash(cfg));
  CHECK(j["solver"] == "euler");
  CHECK(j["n_eval"] == 4);

  // Sampler keys come from the live config, not the checkpoint echo.
  RunConfig faster = cfg;
  apply_overrides(faster, {"steps=2", "solver.kind=heun"});
  const EvalRunResult r2 = run_eval(faster, tr.checkpoint_path,
                                    (data / "val.jsonl").string());
  CHECK(r2.mean_nfe > r.mean_nfe);  // heun S=2 needs 4 evals vs 1
}

TEST_CASE("run_sweep covers the grid deterministically") {
  RunConfig cfg = tiny_config();
  apply_overrides(cfg, {"sweep.n_eval=4,6", "sweep.steps=1,2",
                        "sweep.solvers=euler"});
  const fs::path data = fresh_dir("sweep_data");
  run_gen_data(cfg, data.string());
  const fs::path out = fresh_dir("sweep_train");
  const TrainRunResult tr = run_train(cfg, data.string(), out.string());

  const fs::path sweep1 = fresh_dir("sweep_out1");
  const SweepResult s1 = run_sweep(cfg, tr.checkpoint_path,
                                   (data / "val.jsonl").string(),
                                   sweep1.string(), 1);
  REQUIRE(s1.rows.size() == 4);
  CHECK(s1.rows[0].n_eval == 4);
  CHECK(s1.rows[0].steps == 1);
  CHECK(s1.rows[1].steps == 2);
  CHECK(s1.rows[2].n_eval == 6);
  for (const auto& row : s1.rows) CHECK(row.solver == "euler");

  const std::string csv = slurp(s1.csv_path);
  CHECK(csv.find("# config_hash=" + config_hash(cfg)) == 0);
  CHECK(csv.find("n_eval,steps,solver,ap,ap50,ap75,recall,nfe,ms_per_scene\n") !=
        std::string::npos);
  // 1 comment + 1 header + 4 rows, trailing newline.
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);

  const json j = json::parse(slurp(s1.json_path));
  REQUIRE(j["rows"].size() == 4);
  CHECK(j["rows"][0]["n_eval"] == 4);

  // Threaded run reproduces the serial metrics cell for cell.
  const fs::path sweep2 = fresh_dir("sweep_out2");
  const SweepResult s2 = run_sweep(cfg, tr.checkpoint_path,
                                   (data / "val.jsonl").string(),
                                   sweep2.string(), 3);
  REQUIRE(s2.rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(s1.rows[i].run.mean_nfe == s2.rows[i].run.mean_nfe);
    const bool both_nan = std::isnan(s1.rows[i].run.eval.ap50) &&
                          std::isnan(s2.rows[i].run.eval.ap50);
    CHECK((both_nan || s1.rows[i].run.eval.ap50 == s2.rows[i].run.eval.ap50));
  }

  CHECK_THROWS_AS(run_sweep(cfg, tr.checkpoint_path,
                            (data / "val.jsonl").string(), sweep2.string(), 0),
                  Error);
}

TEST_CASE("run_ablate produces the full variant table") {
  RunConfig cfg = tiny_config();
  apply_overrides(cfg, {"ablate.train_steps=6", "ablate.train_scenes=4",
                        "ablate.eval_scenes=2", "solver.max_steps=8"});
  const fs::path out = fresh_dir("ablate_out");
  const AblateResult r = run_ablate(cfg, out.string());

  // 4 priors x 3 step counts + 4 matchers x 3 + 4 ODE solvers + ddim.
  REQUIRE(r.rows.size() == 29);
  std::set<std::string> prior_variants, match_variants, solver_variants;
  for (const auto& row : r.rows) {
    if (row.axis == "prior") prior_variants.insert(row.variant);
    if (row.axis == "match") match_variants.insert(row.variant);
    if (row.axis == "solver") solver_variants.insert(row.variant);
  }
  CHECK(prior_variants ==
        std::set<std::string>({"gauss", "derived", "derived_bucketed",
                               "dependent"}));
  CHECK(match_variants ==
        std::set<std::string>({"rand", "hung_c", "hung_g", "hung_i"}));
  CHECK(solver_variants ==
        std::set<std::string>({"euler", "heun", "rk4", "dopri5", "ddim"}));

  REQUIRE(r.csv_paths.size() == 3);
  for (const auto& path : r.csv_paths) {
    const std::string csv = slurp(path);
    CHECK(csv.find("variant,steps,solver,") != std::string::npos);
  }
  const json j = json::parse(slurp(r.json_path));
  CHECK(j["rows"].size() == 29);
}

}  // TEST_SUITE
