#include "flowdet/pipeline.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "flowdet/error.hpp"
#include "flowdet/sampling.hpp"

namespace flowdet {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string item = s.substr(pos, comma - pos);
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      raise(ErrorCode::ConfigError, key + ": bad list item '" + item + "'");
    }
    pos = comma + 1;
  }
  if (out.empty()) raise(ErrorCode::ConfigError, key + ": empty list");
  return out;
}

std::vector<std::string> parse_name_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(s.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

json eval_to_json(const EvalRunResult& r, bool with_curves) {
  json j;
  j["ap"] = r.eval.ap;
  j["ap50"] = r.eval.ap50;
  j["ap75"] = r.eval.ap75;
  j["recall"] = r.eval.recall;
  j["ap_small"] = r.eval.ap_small;
  j["ap_medium"] = r.eval.ap_medium;
  j["ap_large"] = r.eval.ap_large;
  j["valid"] = r.eval.valid;
  j["n_gt"] = r.eval.n_gt;
  j["n_det"] = r.eval.n_det;
  j["n_scenes"] = r.n_scenes;
  j["n_truncated"] = r.n_truncated;
  j["nfe"] = r.mean_nfe;
  j["ms_per_scene"] = r.ms_per_scene;
  if (with_curves) {
    json curves = json::array();
    for (const auto& c : r.eval.curves) {
      json jc;
      jc["iou_thr"] = c.iou_thr;
      jc["precision"] = c.precision;
      curves.push_back(std::move(jc));
    }
    j["curves"] = std::move(curves);
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << text;
  if (!out) raise(ErrorCode::IoError, "short write to " + path);
}

// Shared CSV row tail: metric columns after the grid/axis columns.
std::string metric_cells(const EvalRunResult& r) {
  return fmt(r.eval.ap, 6) + "," + fmt(r.eval.ap50, 6) + "," +
         fmt(r.eval.ap75, 6) + "," + fmt(r.eval.recall, 6) + "," +
         fmt(r.mean_nfe, 2) + "," + fmt(r.ms_per_scene, 3);
}

// Rebuilds the module configs stored in a checkpoint's config echo.
RunConfig checkpoint_run_config(const Checkpoint& ckpt) {
  RunConfig echo;
  echo.values = ckpt.config;
  validate_config(echo);
  return echo;
}

}  // namespace

std::uint64_t scene_stream_seed(std::uint64_t seed, std::uint64_t salt,
                                std::int64_t index) {
  return splitmix64(
      hash_combine(hash_combine(seed, salt), static_cast<std::uint64_t>(index)));
}

std::vector<Scene> make_scenes(const SceneConfig& scfg, std::uint64_t seed,
                               std::uint64_t salt, int count) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (int i = 0; i < count; ++i) {
    Scene s = generate_scene(scene_stream_seed(seed, salt, i), scfg);
    s.scene_id = i;
    scenes.push_back(std::move(s));
  }
  return scenes;
}

GenDataResult run_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  const SceneConfig scfg = to_scene_config(cfg);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  ensure_dir(out_dir);

  GenDataResult result;
  result.config_hash = config_hash(cfg);
  result.n_train = static_cast<int>(cfg.get_int("data.train_scenes"));
  result.n_val = static_cast<int>(cfg.get_int("data.val_scenes"));
  result.train_path = join(out_dir, "train.jsonl");
  result.val_path = join(out_dir, "val.jsonl");

  Dataset split;
  split.num_classes = scfg.num_classes;
  split.config_hash = result.config_hash;
  split.scenes = make_scenes(scfg, seed, kDataTrainSalt, result.n_train);
  write_dataset(split, result.train_path);
  split.scenes = make_scenes(scfg, seed, kDataValSalt, result.n_val);
  write_dataset(split, result.val_path);
  return result;
}

TrainedModel init_model(const TrainConfig& tc,
                        const std::vector<Scene>& train_scenes) {
  TrainedModel model;
  model.prior.kind = tc.prior_kind;
  if (tc.prior_kind == PriorKind::Derived ||
      tc.prior_kind == PriorKind::DerivedSizeBucketed) {
    const auto boxes = collect_gt_boxes(train_scenes);
    auto [mu, sigma] = fit_derived_stats(boxes);
    model.prior.mu = mu;
    model.prior.sigma = sigma;
    if (tc.prior_kind == PriorKind::DerivedSizeBucketed)
      model.prior.buckets = fit_size_buckets(boxes, tc.prior_buckets);
  }
  Rng rng = Rng::child(tc.seed, kInitSalt);
  init_decoder(model.params, tc.decoder, rng);
  if (tc.prior_kind == PriorKind::Dependent)
    init_prior_head(model.params, tc.decoder.channels,
                    model.prior.dependent_hidden, rng);
  return model;
}

StepMetrics fit_model(const std::vector<Scene>& scenes, const TrainConfig& tc,
                      nn::ParamStore& params, const PriorSpec& prior,
                      const FitHooks& hooks) {
  tc.validate();
  if (scenes.empty())
    raise(ErrorCode::InsufficientData, "fit_model: no training scenes");
  StepMetrics last;
  const std::int64_t start = params.step_count();
  for (std::int64_t step = start; step < tc.total_steps; ++step) {
    Rng pick = Rng::child(tc.seed, kBatchSalt, step);
    std::vector<const Scene*> batch;
    batch.reserve(tc.batch_size);
    for (int b = 0; b < tc.batch_size; ++b)
      batch.push_back(&scenes[pick.uniform_int(static_cast<int>(scenes.size()))]);
    last = train_step(batch, params, prior, tc, step);
    const bool done = step + 1 == tc.total_steps;
    if (hooks.log && hooks.log_every > 0 &&
        (step % hooks.log_every == 0 || done)) {
      (*hooks.log) << "step " << (step + 1) << "/" << tc.total_steps
                   << " loss=" << fmt(last.total, 4) << " cls=" << fmt(last.cls, 4)
                   << " l1=" << fmt(last.l1, 4) << " giou=" << fmt(last.giou, 4)
                   << " prior=" << fmt(last.prior, 4)
                   << " |g|=" << fmt(last.grad_norm, 3)
                   << " lr=" << fmt(last.lr, 6) << "\n";
    }
    if (hooks.on_eval && hooks.eval_every > 0 &&
        ((step + 1) % hooks.eval_every == 0 || done))
      hooks.on_eval(step + 1);
  }
  return last;
}

EvalRunResult evaluate_model(const std::vector<Scene>& scenes,
                             nn::ParamStore& params, const DecoderConfig& dcfg,
                             const PriorSpec& prior, const SamplerConfig& scfg,
                             std::uint64_t seed, int max_scenes) {
  scfg.validate();
  EvalRunResult result;
  const int n = max_scenes > 0
                    ? std::min<int>(max_scenes, static_cast<int>(scenes.size()))
                    : static_cast<int>(scenes.size());
  std::vector<EvalInput> inputs;
  inputs.reserve(n);
  double total_ms = 0.0;
  double total_nfe = 0.0;
  for (int i = 0; i < n; ++i) {
    const Scene& scene = scenes[i];
    Rng rng = Rng::child(seed, kEvalSalt,
                         static_cast<std::uint64_t>(scene.scene_id));
    const auto t0 = std::chrono::steady_clock::now();
    SampleResult s =
        sample_detections(scene.raster, params, dcfg, prior, scfg, rng);
    const auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    total_nfe += s.nfe;
    if (s.truncated) ++result.n_truncated;
    inputs.push_back(
        {scene.scene_id, std::move(s.detections), scene.gt_boxes, scene.gt_classes});
  }
  result.eval = coco_style_ap(inputs);
  result.n_scenes = n;
  result.mean_nfe = n > 0 ? total_nfe / n : 0.0;
  result.ms_per_scene = n > 0 ? total_ms / n : 0.0;
  return result;
}

TrainRunResult run_train(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir,
                         const std::string& resume_path, std::ostream* log) {
  const TrainConfig tc = to_train_config(cfg);
  tc.validate();
  Dataset train = read_dataset(join(data_dir, "train.jsonl"));
  Dataset val = read_dataset(join(data_dir, "val.jsonl"));
  if (train.num_classes != tc.decoder.num_classes)
    raise(ErrorCode::ConfigError,
          "dataset has " + std::to_string(train.num_classes) +
              " classes, config expects " +
              std::to_string(tc.decoder.num_classes));
  ensure_dir(out_dir);

  TrainedModel model;
  if (!resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    if (ckpt.config_hash != config_hash(cfg) && log)
      (*log) << "note: resume config differs from checkpoint ("
             << ckpt.config_hash << " vs " << config_hash(cfg) << ")\n";
    model.params = std::move(ckpt.params);
    model.prior = ckpt.prior;
  } else {
    model = init_model(tc, train.scenes);
  }

  TrainRunResult result;
  result.checkpoint_path = join(out_dir, "checkpoint.json");
  const auto save = [&]() {
    Checkpoint ckpt;
    ckpt.config = cfg.values;
    ckpt.prior = model.prior;
    ckpt.params = model.params;
    ckpt.objective = tc.objective;
    save_checkpoint(ckpt, result.checkpoint_path);
  };

  SamplerConfig scfg = to_sampler_config(cfg);
  const int eval_cap = static_cast<int>(cfg.get_int("eval.scenes"));
  FitHooks hooks;
  hooks.log_every = cfg.get_int("train.log_every");
  hooks.log = log;
  hooks.eval_every = cfg.get_int("train.eval_every");
  hooks.on_eval = [&](std::int64_t step) {
    result.last_eval = evaluate_model(val.scenes, model.params, tc.decoder,
                                      model.prior, scfg, tc.seed, eval_cap);
    result.has_eval = true;
    save();
    if (log)
      (*log) << "eval @" << step << " ap=" << fmt(result.last_eval.eval.ap, 4)
             << " ap50=" << fmt(result.last_eval.eval.ap50, 4)
             << " ap75=" << fmt(result.last_eval.eval.ap75, 4)
             << " recall=" << fmt(result.last_eval.eval.recall, 4) << "\n";
  };

  result.last = fit_model(train.scenes, tc, model.params, model.prior, hooks);
  result.steps_run = model.params.step_count();
  save();
  return result;
}

EvalRunResult run_eval(const RunConfig& cfg, const std::string& ckpt_path,
                       const std::string& data_path, const std::string& out_json,
                       std::ostream* log) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig echo = checkpoint_run_config(ckpt);
  const TrainConfig trained = to_train_config(echo);
  Dataset data = read_dataset(data_path);
  if (data.num_classes != trained.decoder.num_classes)
    raise(ErrorCode::ConfigError, "dataset classes do not match checkpoint");

  SamplerConfig scfg = to_sampler_config(cfg);
  // The diffusion schedule is a training-time property; take it from the echo.
  scfg.ddpm_timesteps = trained.ddpm_timesteps;
  scfg.ddpm_scale = trained.ddpm_scale;
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const int cap = static_cast<int>(cfg.get_int("eval.scenes"));
  if (log)
    (*log) << "eval: objective=" << ckpt.objective
           << " solver=" << solver_kind_name(scfg.solver) << " steps="
           << scfg.steps << " n_eval=" << scfg.n_eval << "\n";

  EvalRunResult result = evaluate_model(data.scenes, ckpt.params,
                                        trained.decoder, ckpt.prior, scfg,
                                        seed, cap);
  if (!out_json.empty()) {
    json j = eval_to_json(result, true);
    j["config_hash"] = config_hash(cfg);
    j["checkpoint_hash"] = ckpt.config_hash;
    j["solver"] = solver_kind_name(scfg.solver);
    j["steps"] = scfg.steps;
    j["n_eval"] = scfg.n_eval;
    write_text(out_json, j.dump(2) + "\n");
  }
  if (log)
    (*log) << "ap=" << fmt(result.eval.ap, 4) << " ap50="
           << fmt(result.eval.ap50, 4) << " ap75=" << fmt(result.eval.ap75, 4)
           << " recall=" << fmt(result.eval.recall, 4) << " nfe="
           << fmt(result.mean_nfe, 2) << " ms/scene="
           << fmt(result.ms_per_scene, 3) << "\n";
  return result;
}

SweepResult run_sweep(const RunConfig& cfg, const std::string& ckpt_path,
                      const std::string& data_path, const std::string& out_dir,
                      int threads, std::ostream* log) {
  if (threads < 1) raise(ErrorCode::ConfigError, "threads must be >= 1");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig echo = checkpoint_run_config(ckpt);
  const TrainConfig trained = to_train_config(echo);
  Dataset data = read_dataset(data_path);
  ensure_dir(out_dir);

  const auto n_evals = parse_int_list("sweep.n_eval", cfg.get_str("sweep.n_eval"));
  const auto steps_list = parse_int_list("sweep.steps", cfg.get_str("sweep.steps"));
  std::vector<SolverKind> solvers;
  for (const auto& name : parse_name_list(cfg.get_str("sweep.solvers")))
    solvers.push_back(solver_kind_from_name(name));

  const SamplerConfig base = to_sampler_config(cfg);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  const int cap = static_cast<int>(cfg.get_int("eval.scenes"));

  SweepResult result;
  for (int ne : n_evals)
    for (int st : steps_list)
      for (SolverKind sk : solvers) {
        SweepRow row;
        row.n_eval = ne;
        row.steps = st;
        row.solver = solver_kind_name(sk);
        result.rows.push_back(std::move(row));
      }

  const auto run_cell = [&](SweepRow& row, nn::ParamStore& params) {
    SamplerConfig scfg = base;
    scfg.n_eval = row.n_eval;
    scfg.steps = row.steps;
    scfg.solver = solver_kind_from_name(row.solver);
    scfg.ddpm_timesteps = trained.ddpm_timesteps;
    scfg.ddpm_scale = trained.ddpm_scale;
    row.run = evaluate_model(data.scenes, params, trained.decoder, ckpt.prior,
                             scfg, seed, cap);
  };

  const int workers = std::min<int>(threads, static_cast<int>(result.rows.size()));
  if (workers <= 1) {
    for (auto& row : result.rows) {
      run_cell(row, ckpt.params);
      if (log)
        (*log) << "sweep n_eval=" << row.n_eval << " steps=" << row.steps
               << " solver=" << row.solver << " ap=" << fmt(row.run.eval.ap, 4)
               << " nfe=" << fmt(row.run.mean_nfe, 2) << "\n";
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&]() {
        nn::ParamStore local = ckpt.params;  // grads are scratch per worker
        for (std::size_t i = next.fetch_add(1); i < result.rows.size();
             i = next.fetch_add(1))
          run_cell(result.rows[i], local);
      });
    for (auto& t : pool) t.join();
  }

  const std::string hash = config_hash(cfg);
  std::string csv = "# config_hash=" + hash + "\n";
  csv += "n_eval,steps,solver,ap,ap50,ap75,recall,nfe,ms_per_scene\n";
  json jrows = json::array();
  for (const auto& row : result.rows) {
    csv += std::to_string(row.n_eval) + "," + std::to_string(row.steps) + "," +
           row.solver + "," + metric_cells(row.run) + "\n";
    json jr = eval_to_json(row.run, true);
    jr["n_eval"] = row.n_eval;
    jr["steps"] = row.steps;
    jr["solver"] = row.solver;
    jrows.push_back(std::move(jr));
  }
  result.csv_path = join(out_dir, "sweep.csv");
  result.json_path = join(out_dir, "sweep.json");
  write_text(result.csv_path, csv);
  json j;
  j["config_hash"] = hash;
  j["checkpoint_hash"] = ckpt.config_hash;
  j["rows"] = std::move(jrows);
  write_text(result.json_path, j.dump(2) + "\n");
  return result;
}

AblateResult run_ablate(const RunConfig& cfg, const std::string& out_dir,
                        std::ostream* log) {
  const SceneConfig scfg = to_scene_config(cfg);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  ensure_dir(out_dir);

  const int n_train = static_cast<int>(cfg.get_int("ablate.train_scenes"));
  const int n_eval_scenes = static_cast<int>(cfg.get_int("ablate.eval_scenes"));
  const auto train_scenes = make_scenes(scfg, seed, kDataTrainSalt, n_train);
  const auto val_scenes = make_scenes(scfg, seed, kDataValSalt, n_eval_scenes);

  const TrainConfig base_tc = [&] {
    TrainConfig tc = to_train_config(cfg);
    tc.total_steps = cfg.get_int("ablate.train_steps");
    tc.warmup_steps = std::min(tc.warmup_steps, tc.total_steps / 5);
    return tc;
  }();
  const SamplerConfig base_sc = to_sampler_config(cfg);

  std::map<std::string, TrainedModel> cache;
  const auto model_for = [&](PriorKind prior, MatchStrategy match,
                             const std::string& objective) -> TrainedModel& {
    const std::string key = std::string(prior_kind_name(prior)) + "|" +
                            match_strategy_name(match) + "|" + objective;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    TrainConfig tc = base_tc;
    tc.prior_kind = prior;
    tc.strategy = match;
    tc.objective = objective;
    if (log) (*log) << "ablate: training " << key << "\n";
    TrainedModel model = init_model(tc, train_scenes);
    FitHooks hooks;
    hooks.log_every = 0;
    fit_model(train_scenes, tc, model.params, model.prior, hooks);
    return cache.emplace(key, std::move(model)).first->second;
  };

  const auto eval_cell = [&](TrainedModel& model, SolverKind solver,
                             int steps) {
    SamplerConfig sc = base_sc;
    sc.solver = solver;
    sc.steps = steps;
    return evaluate_model(val_scenes, model.params, base_tc.decoder,
                          model.prior, sc, seed, 0);
  };

  AblateResult result;
  const auto push_row = [&](const std::string& axis, const std::string& variant,
                            int steps, SolverKind solver, EvalRunResult run) {
    AblateRow row;
    row.axis = axis;
    row.variant = variant;
    row.steps = steps;
    row.solver = solver_kind_name(solver);
    row.run = std::move(run);
    if (log)
      (*log) << "ablate " << axis << "=" << variant << " steps=" << steps
             << " solver=" << row.solver << " ap=" << fmt(row.run.eval.ap, 4)
             << " ap50=" << fmt(row.run.eval.ap50, 4)
             << " nfe=" << fmt(row.run.mean_nfe, 2) << "\n";
    result.rows.push_back(std::move(row));
  };

  const std::array<PriorKind, 4> priors = {
      PriorKind::GaussN, PriorKind::Derived, PriorKind::DerivedSizeBucketed,
      PriorKind::Dependent};
  for (PriorKind prior : priors) {
    TrainedModel& model = model_for(prior, base_tc.strategy, "cfm");
    for (int steps : {1, 2, 3})
      push_row("prior", prior_kind_name(prior), steps, base_sc.solver,
               eval_cell(model, base_sc.solver, steps));
  }

  const std::array<MatchStrategy, 4> matchers = {
      MatchStrategy::Rand, MatchStrategy::HungC, MatchStrategy::HungG,
      MatchStrategy::HungI};
  for (MatchStrategy match : matchers) {
    TrainedModel& model = model_for(base_tc.prior_kind, match, "cfm");
    for (int steps : {1, 2, 3})
      push_row("match", match_strategy_name(match), steps, base_sc.solver,
               eval_cell(model, base_sc.solver, steps));
  }

  const std::array<SolverKind, 4> ode_solvers = {
      SolverKind::Euler, SolverKind::Heun, SolverKind::Rk4, SolverKind::Dopri5};
  TrainedModel& cfm = model_for(base_tc.prior_kind, base_tc.strategy, "cfm");
  for (SolverKind solver : ode_solvers)
    push_row("solver", solver_kind_name(solver), base_sc.steps, solver,
             eval_cell(cfm, solver, base_sc.steps));
  TrainedModel& ddpm = model_for(base_tc.prior_kind, base_tc.strategy, "ddpm");
  push_row("solver", solver_kind_name(SolverKind::DdimBaseline), base_sc.steps,
           SolverKind::DdimBaseline,
           eval_cell(ddpm, SolverKind::DdimBaseline, base_sc.steps));

  const std::string hash = config_hash(cfg);
  json jrows = json::array();
  for (const std::string axis : {"prior", "match", "solver"}) {
    std::string csv = "# config_hash=" + hash + "\n";
    csv += "variant,steps,solver,ap,ap50,ap75,recall,nfe,ms_per_scene\n";
    for (const auto& row : result.rows) {
      if (row.axis != axis) continue;
      csv += row.variant + "," + std::to_string(row.steps) + "," + row.solver +
             "," + metric_cells(row.run) + "\n";
      json jr = eval_to_json(row.run, false);
      jr["axis"] = row.axis;
      jr["variant"] = row.variant;
      jr["steps"] = row.steps;
      jr["solver"] = row.solver;
      jrows.push_back(std::move(jr));
    }
    const std::string path = join(out_dir, "ablate_" + axis + ".csv");
    write_text(path, csv);
    result.csv_paths.push_back(path);
  }
  result.json_path = join(out_dir, "ablate.json");
  json j;
  j["config_hash"] = hash;
  j["rows"] = std::move(jrows);
  write_text(result.json_path, j.dump(2) + "\n");
  return result;
}

}  // namespace flowdet
