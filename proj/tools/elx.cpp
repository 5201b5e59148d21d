// SPDX-License-Identifier: Apache-2.0
//
// elx: elastic sub-model serving toolkit.
//
// Offline: train-toy -> elastify -> calibrate -> label -> train-policy.
// Online:  synth-trace -> replay -> report. `verify` runs the self-check
// suites (permutation consistency, zero-copy switching, oracles).

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elx/elastify.hpp"
#include "elx/planner.hpp"
#include "elx/replay.hpp"
#include "elx/trace.hpp"
#include "elx/train.hpp"
#include "elx/verify.hpp"

namespace {

using namespace elx;

struct TaskFlags {
  TaskParams params;

  void attach(CLI::App* cmd) {
    cmd->add_option("--pairs", params.n_pairs, "key:value pairs per prompt");
    cmd->add_option("--distractors", params.distractor_len, "max filler tokens per prompt");
    cmd->add_option("--value-len", params.value_len, "answer tokens per value");
    cmd->add_option("--keys", params.n_keys, "key vocabulary size");
    cmd->add_option("--values", params.n_values, "value vocabulary size");
    cmd->add_option("--filler", params.n_filler, "filler vocabulary size");
  }
};

struct ConfigFlags {
  ModelConfig config;
  std::string mlp = "gated";

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", config.n_layers, "transformer layers");
    cmd->add_option("--heads", config.n_heads, "attention heads");
    cmd->add_option("--head-dim", config.head_dim, "dimension per head");
    cmd->add_option("--d-ff", config.d_ff, "MLP hidden width");
    cmd->add_option("--mlp", mlp, "mlp kind: gated|plain");
    cmd->add_flag("--rope,!--no-rope", config.use_rope, "rotary position embedding");
    cmd->add_flag("--bias", config.use_bias, "biased q/k/v and up/gate projections");
    cmd->add_option("--model-seed", config.seed, "weight init seed");
  }

  ModelConfig resolve(const TaskParams& task) {
    if (mlp == "gated") {
      config.mlp_kind = MlpKind::kGated;
    } else if (mlp == "plain") {
      config.mlp_kind = MlpKind::kPlain;
    } else {
      throw InputError("--mlp must be 'gated' or 'plain'");
    }
    config.vocab_size = task.vocab_size();
    config.validate();
    return config;
  }
};

std::vector<Slo> parse_slos(const std::string& text) {
  if (text.empty()) return table3_slos();
  std::vector<Slo> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string pair = text.substr(pos, comma - pos);
    const size_t colon = pair.find(':');
    if (colon == std::string::npos) {
      throw InputError("SLO list must look like '0.2:0.5,0.4:0.7,...'");
    }
    Slo s;
    s.zeta_ttft = std::stod(pair.substr(0, colon));
    s.zeta_tpot = std::stod(pair.substr(colon + 1));
    if (!s.valid()) throw InputError("SLO ratios must lie in (0, 1]");
    out.push_back(s);
    pos = comma + 1;
  }
  return out;
}

int cmd_train_toy(const std::string& out_path, ConfigFlags& cfgf, const TaskFlags& taskf,
                  TrainToyOptions opts) {
  const ModelConfig config = cfgf.resolve(taskf.params);
  opts.verbose = true;
  TrainReport report;
  const Weights w = train_toy(config, taskf.params, opts, &report);
  std::printf("final loss %.4f, eval accuracy %.3f\n", report.final_loss,
              report.eval_accuracy);
  save_base_model(w, out_path);
  std::printf("base model written to %s (%lld params)\n", out_path.c_str(),
              static_cast<long long>(w.param_count()));
  return kOk;
}

int cmd_elastify(const std::string& model_path, const std::string& out_path,
                 const TaskFlags& taskf, ElastifyOptions opts,
                 const std::string& fractions_text) {
  const Weights w = load_base_model(model_path);
  if (w.config.vocab_size != taskf.params.vocab_size()) {
    throw InputError("task vocabulary does not match the model");
  }
  if (!fractions_text.empty()) {
    opts.fractions.clear();
    size_t pos = 0;
    while (pos < fractions_text.size()) {
      size_t comma = fractions_text.find(',', pos);
      if (comma == std::string::npos) comma = fractions_text.size();
      opts.fractions.push_back(std::stod(fractions_text.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  }
  opts.verbose = true;
  const ElasticCheckpoint ckpt = elastify(w, taskf.params, opts);
  save_checkpoint(ckpt, out_path);
  std::printf("elastic checkpoint written to %s\n", out_path.c_str());
  std::printf("  anchors:");
  for (int a : ckpt.anchors) std::printf(" %d", a);
  std::printf("\n  levels:");
  for (const auto& e : ckpt.levels.levels) std::printf(" %d%%", e.percent);
  std::printf("\n");
  return kOk;
}

int cmd_calibrate(const std::string& ckpt_path, const std::string& out_path,
                  const std::string& lengths_text, int reps, uint64_t seed) {
  ElasticRuntime rt(load_checkpoint(ckpt_path));
  std::vector<int> lengths;
  size_t pos = 0;
  while (pos < lengths_text.size()) {
    size_t comma = lengths_text.find(',', pos);
    if (comma == std::string::npos) comma = lengths_text.size();
    lengths.push_back(std::stoi(lengths_text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  std::vector<int> pcts;
  for (const auto& e : rt.checkpoint().levels.levels) pcts.push_back(e.percent);
  RuntimeProber prober(rt, seed);
  const LatencyModel lm = calibrate(prober, lengths, pcts, reps);
  const DecisionGrid grid = DecisionGrid::from_levels(rt.checkpoint().levels);
  save_latency(lm, grid, out_path);
  std::printf("ttft(L,s) = %.3e * L*s + %.3e   (median APE %.1f%%)\n", lm.a, lm.b,
              100.0 * lm.ttft_mape);
  std::printf("tpot(s)   = %.3e * s   + %.3e   (median APE %.1f%%)\n", lm.c, lm.d,
              100.0 * lm.tpot_mape);
  std::printf("latency model written to %s\n", out_path.c_str());
  return kOk;
}

int cmd_label(const std::string& ckpt_path, const std::string& latency_path,
              const std::string& out_path, const std::string& scorer_kind,
              const std::string& scorer_out, const TaskFlags& taskf, int count,
              uint64_t seed, uint64_t label_seed, const std::string& slos_text,
              int scorer_prompts) {
  ElasticRuntime rt(load_checkpoint(ckpt_path));
  auto [lm, grid] = load_latency(latency_path);
  if (rt.checkpoint().config().vocab_size != taskf.params.vocab_size()) {
    throw InputError("task vocabulary does not match the checkpoint");
  }
  Scorer scorer;
  if (scorer_kind == "learned") {
    ScorerTrainOptions sopts;
    sopts.n_prompts = scorer_prompts;
    sopts.seed = mix_seed(seed, 0x5c03);
    scorer = train_scorer(taskf.params, sopts);
  } else if (scorer_kind == "heuristic") {
    scorer = Scorer::heuristic(taskf.params);
  } else if (scorer_kind == "uniform") {
    scorer = Scorer::uniform();
  } else {
    throw InputError("--scorer must be learned|heuristic|uniform");
  }
  if (!scorer_out.empty()) save_scorer(scorer, scorer_out);

  const std::vector<Slo> slos = parse_slos(slos_text);
  std::vector<LabelledExample> labels;
  labels.reserve(static_cast<size_t>(count));
  int fallbacks = 0;
  for (int i = 0; i < count; ++i) {
    const uint64_t task_seed = mix_seed(seed, static_cast<uint64_t>(i));
    const TaskInstance inst = gen_task(taskf.params, task_seed);
    const Slo& slo = slos[static_cast<size_t>(i) % slos.size()];
    labels.push_back(label_one(rt, scorer, lm, grid, inst, task_seed, slo, label_seed));
    if (labels.back().fallback) ++fallbacks;
  }
  save_labels(labels, out_path);
  std::printf("%d labels written to %s (%d random fallbacks)\n", count, out_path.c_str(),
              fallbacks);
  return kOk;
}

int cmd_train_policy(const std::string& labels_path, const std::string& scorer_path,
                     const std::string& latency_path, const std::string& out_path,
                     PolicyTrainOptions opts, uint64_t bundle_seed) {
  const std::vector<LabelledExample> labels = load_labels(labels_path);
  const Scorer scorer = load_scorer(scorer_path);
  auto [lm, grid] = load_latency(latency_path);
  const PolicyModel policy = train_policy(labels, grid, opts);
  PolicyBundle bundle;
  bundle.task = scorer.task();
  bundle.scorer = scorer;
  bundle.policy = policy;
  bundle.latency = lm;
  bundle.grid = grid;
  bundle.seed = bundle_seed;
  save_bundle(bundle, out_path);
  std::printf("policy trained on %zu examples, train accuracy %.3f\n", labels.size(),
              policy.train_accuracy);
  std::printf("policy bundle written to %s\n", out_path.c_str());
  return kOk;
}

int cmd_synth_trace(const std::string& out_path, const TaskFlags& taskf, int n, double alpha,
                    double rate, uint64_t seed, const std::string& slos_text) {
  TraceSpec spec;
  spec.n_requests = n;
  spec.alpha = alpha;
  spec.poisson_rate = rate;
  spec.seed = seed;
  spec.task = taskf.params;
  spec.slos = parse_slos(slos_text);
  const std::vector<Request> trace = synth_trace(spec);
  save_trace(trace, out_path);
  std::printf("%zu requests written to %s\n", trace.size(), out_path.c_str());
  return kOk;
}

int cmd_replay(const std::string& trace_path, const std::string& ckpt_path,
               const std::string& bundle_path, const std::string& out_path, bool render) {
  const std::vector<Request> trace = load_trace(trace_path);
  ElasticRuntime rt(load_checkpoint(ckpt_path));
  const PolicyBundle bundle = load_bundle(bundle_path);
  const ReplayReport report = replay(trace, rt, bundle);
  if (!out_path.empty()) save_report(report, out_path);
  if (render || out_path.empty()) std::fputs(render_report(report, false).c_str(), stdout);
  if (!out_path.empty()) std::printf("replay report written to %s\n", out_path.c_str());
  return kOk;
}

int cmd_report(const std::string& in_path, const std::string& format) {
  const ReplayReport report = load_report(in_path);
  if (format == "json") {
    std::fputs(render_report(report, true).c_str(), stdout);
  } else if (format == "table") {
    std::fputs(render_report(report, false).c_str(), stdout);
  } else {
    throw InputError("--format must be table|json");
  }
  return kOk;
}

int cmd_verify(const VerifyOptions& opts) {
  const std::vector<CheckResult> results = run_verification(opts);
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %-32s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str());
    all = all && r.pass;
  }
  return all ? kOk : kInternalError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"elastic sub-model serving toolkit"};
  app.require_subcommand(1);

  // train-toy
  auto* train_cmd = app.add_subcommand("train-toy", "fit the toy transformer on the task");
  std::string train_out = "base.elx";
  ConfigFlags train_cfg;
  TaskFlags train_task;
  TrainToyOptions train_opts;
  train_cmd->add_option("--out", train_out, "output base model path");
  train_cfg.attach(train_cmd);
  train_task.attach(train_cmd);
  train_cmd->add_option("--steps", train_opts.steps, "optimizer steps");
  train_cmd->add_option("--batch", train_opts.batch_size, "sequences per step");
  train_cmd->add_option("--lr", train_opts.lr, "learning rate");
  train_cmd->add_option("--data-seed", train_opts.data_seed, "training data seed");
  train_cmd->add_option("--eval", train_opts.eval_instances, "held-out eval instances");

  // elastify
  auto* ela_cmd = app.add_subcommand(
      "elastify", "profile, reorder, build levels and train recovery adapters");
  std::string ela_model = "base.elx", ela_out = "elastic.elx", ela_fracs;
  TaskFlags ela_task;
  ElastifyOptions ela_opts;
  ela_cmd->add_option("--model", ela_model, "base model path")->required();
  ela_cmd->add_option("--out", ela_out, "output checkpoint path");
  ela_task.attach(ela_cmd);
  ela_cmd->add_option("--anchor-fraction", ela_opts.anchor_fraction,
                      "fraction of layers locked as anchors");
  ela_cmd->add_option("--fractions", ela_fracs,
                      "comma-separated global fractions (default 0.2..1.0 step 0.1)");
  ela_cmd->add_option("--rank", ela_opts.adapter.rank, "adapter rank");
  ela_cmd->add_option("--adapter-steps", ela_opts.adapter.steps, "adapter training steps");
  ela_cmd->add_option("--adapter-lr", ela_opts.adapter.lr, "adapter learning rate");
  ela_cmd->add_option("--calib-batches", ela_opts.calibration_batches,
                      "calibration batches");
  ela_cmd->add_option("--calib-instances", ela_opts.batch_instances,
                      "instances per calibration batch");
  ela_cmd->add_option("--calib-seed", ela_opts.calibration_seed, "calibration data seed");
  ela_cmd->add_option("--recovery-instances", ela_opts.recovery_instances,
                      "recovery corpus size");
  bool ela_no_recovery = false;
  ela_cmd->add_flag("--no-recovery", ela_no_recovery, "skip adapter training");

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "fit the latency model on the runtime");
  std::string cal_ckpt = "elastic.elx", cal_out = "latency.json";
  std::string cal_lengths = "32,64,128,192";
  int cal_reps = 5;
  uint64_t cal_seed = 3;
  cal_cmd->add_option("--checkpoint", cal_ckpt, "elastic checkpoint")->required();
  cal_cmd->add_option("--out", cal_out, "output latency model path");
  cal_cmd->add_option("--lengths", cal_lengths, "probe prompt lengths");
  cal_cmd->add_option("--reps", cal_reps, "repetitions per probe");
  cal_cmd->add_option("--seed", cal_seed, "probe prompt seed");

  // label
  auto* lab_cmd = app.add_subcommand("label", "self-induced decision labelling");
  std::string lab_ckpt = "elastic.elx", lab_latency = "latency.json";
  std::string lab_out = "labels.jsonl", lab_scorer = "learned";
  std::string lab_scorer_out = "scorer.json", lab_slos;
  TaskFlags lab_task;
  int lab_n = 600, lab_scorer_prompts = 400;
  uint64_t lab_seed = 31, lab_label_seed = 77;
  lab_cmd->add_option("--checkpoint", lab_ckpt, "elastic checkpoint")->required();
  lab_cmd->add_option("--latency", lab_latency, "latency model path")->required();
  lab_cmd->add_option("--out", lab_out, "output labels path");
  lab_cmd->add_option("--scorer", lab_scorer, "scorer: learned|heuristic|uniform");
  lab_cmd->add_option("--scorer-out", lab_scorer_out, "where to save scorer weights");
  lab_cmd->add_option("--scorer-prompts", lab_scorer_prompts, "scorer training prompts");
  lab_task.attach(lab_cmd);
  lab_cmd->add_option("--n", lab_n, "instances to label");
  lab_cmd->add_option("--seed", lab_seed, "task instance seed");
  lab_cmd->add_option("--label-seed", lab_label_seed, "fallback draw seed");
  lab_cmd->add_option("--slos", lab_slos, "SLO list 'ttft:tpot,...' (default: table)");

  // train-policy
  auto* pol_cmd = app.add_subcommand("train-policy", "fit the decision policy on labels");
  std::string pol_labels = "labels.jsonl", pol_scorer = "scorer.json";
  std::string pol_latency = "latency.json", pol_out = "bundle.json";
  PolicyTrainOptions pol_opts;
  uint64_t pol_bundle_seed = 99;
  pol_cmd->add_option("--labels", pol_labels, "labels path")->required();
  pol_cmd->add_option("--scorer", pol_scorer, "scorer path")->required();
  pol_cmd->add_option("--latency", pol_latency, "latency model path")->required();
  pol_cmd->add_option("--out", pol_out, "output bundle path");
  pol_cmd->add_option("--epochs", pol_opts.epochs, "training epochs");
  pol_cmd->add_option("--lr", pol_opts.lr, "learning rate");
  pol_cmd->add_option("--bundle-seed", pol_bundle_seed, "runtime fallback seed");

  // synth-trace
  auto* tr_cmd = app.add_subcommand("synth-trace", "synthesize a workload trace");
  std::string tr_out = "trace.jsonl", tr_slos;
  TaskFlags tr_task;
  int tr_n = 600;
  double tr_alpha = 0.0, tr_rate = 2.0;
  uint64_t tr_seed = 5;
  tr_cmd->add_option("--out", tr_out, "output trace path");
  tr_task.attach(tr_cmd);
  tr_cmd->add_option("--n", tr_n, "request count");
  tr_cmd->add_option("--alpha", tr_alpha, "SLO skew (>0 favors relaxed SLOs)");
  tr_cmd->add_option("--rate", tr_rate, "Poisson arrival rate (req/s)");
  tr_cmd->add_option("--seed", tr_seed, "trace seed");
  tr_cmd->add_option("--slos", tr_slos, "SLO list 'ttft:tpot,...' (default: table)");

  // replay
  auto* rep_cmd = app.add_subcommand("replay", "serve a trace against the runtime");
  std::string rep_trace = "trace.jsonl", rep_ckpt = "elastic.elx";
  std::string rep_bundle = "bundle.json", rep_out = "report.json";
  bool rep_render = false;
  rep_cmd->add_option("--trace", rep_trace, "trace path")->required();
  rep_cmd->add_option("--checkpoint", rep_ckpt, "elastic checkpoint")->required();
  rep_cmd->add_option("--bundle", rep_bundle, "policy bundle")->required();
  rep_cmd->add_option("--out", rep_out, "output report path");
  rep_cmd->add_flag("--render", rep_render, "also print the summary table");

  // report
  auto* repo_cmd = app.add_subcommand("report", "render a replay report");
  std::string repo_in = "report.json", repo_format = "table";
  repo_cmd->add_option("--in", repo_in, "report path")->required();
  repo_cmd->add_option("--format", repo_format, "table|json");

  // verify
  auto* ver_cmd = app.add_subcommand("verify", "run the self-check suites");
  VerifyOptions ver_opts;
  ver_cmd->add_option("--permutations", ver_opts.permutations, "random permutations");
  ver_cmd->add_option("--switches", ver_opts.switches, "random level switches");
  ver_cmd->add_option("--seed", ver_opts.seed, "verification seed");
  ver_cmd->add_option("--tmp", ver_opts.tmp_dir, "scratch directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? elx::kOk : elx::kInputError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train_toy(train_out, train_cfg, train_task, train_opts);
    if (ela_cmd->parsed()) {
      ela_opts.train_recovery = !ela_no_recovery;
      return cmd_elastify(ela_model, ela_out, ela_task, ela_opts, ela_fracs);
    }
    if (cal_cmd->parsed()) {
      return cmd_calibrate(cal_ckpt, cal_out, cal_lengths, cal_reps, cal_seed);
    }
    if (lab_cmd->parsed()) {
      return cmd_label(lab_ckpt, lab_latency, lab_out, lab_scorer, lab_scorer_out, lab_task,
                       lab_n, lab_seed, lab_label_seed, lab_slos, lab_scorer_prompts);
    }
    if (pol_cmd->parsed()) {
      return cmd_train_policy(pol_labels, pol_scorer, pol_latency, pol_out, pol_opts,
                              pol_bundle_seed);
    }
    if (tr_cmd->parsed()) {
      return cmd_synth_trace(tr_out, tr_task, tr_n, tr_alpha, tr_rate, tr_seed, tr_slos);
    }
    if (rep_cmd->parsed()) {
      return cmd_replay(rep_trace, rep_ckpt, rep_bundle, rep_out, rep_render);
    }
    if (repo_cmd->parsed()) return cmd_report(repo_in, repo_format);
    if (ver_cmd->parsed()) return cmd_verify(ver_opts);
  } catch (const elx::InfeasibleSloError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return elx::kInfeasibleSloError;
  } catch (const elx::CalibrationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return elx::kCalibrationError;
  } catch (const elx::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return elx::kFormatError;
  } catch (const elx::InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return elx::kInputError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return elx::kInternalError;
  }
  return elx::kOk;
}
