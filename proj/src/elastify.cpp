// SPDX-License-Identifier: Apache-2.0
#include "elx/elastify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "elx/autodiff.hpp"
#include "elx/rng.hpp"
#include "elx/train.hpp"

namespace elx {

ImportanceTable profile_importance(const Weights& w,
                                   const std::vector<CalibrationBatch>& batches) {
  if (batches.empty()) throw InputError("profile_importance: no calibration batches");
  const WeightsD dw = w.cast<double>();
  const std::vector<UnitId> units = enumerate_units(w.config);

  ImportanceTable table;
  for (const auto& u : units) table[u] = 0.0;

  for (const auto& batch : batches) {
    if (batch.empty()) throw InputError("profile_importance: empty batch");
    // gradient of the batch-mean loss, accumulated per unit as sum(g*w)
    std::map<const Tensor<double>*, Tensor<double>> grad_acc;
    for (const auto& inst : batch) {
      const TrainSequence seq = to_train_sequence(inst);
      Tape<double> tape;
      auto loss = build_loss<double>(tape, dw, nullptr, seq, true, false);
      tape.backward(loss);
      dw.for_each_tensor([&](const std::string&, const Tensor<double>& t) {
        if (!tape.registered(t)) return;
        const Tensor<double>& g = tape.grad(t);
        auto [it, fresh] = grad_acc.try_emplace(&t, t.shape());
        Tensor<double>& a = it->second;
        for (int64_t j = 0; j < g.numel(); ++j) a[j] += g[j];
      });
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    auto grad_of = [&](const Tensor<double>& t) -> const Tensor<double>& {
      auto it = grad_acc.find(&t);
      if (it == grad_acc.end()) throw LookupError("missing gradient for weight");
      return it->second;
    };
    for (const auto& u : units) {
      const double contrib = unit_grad_dot_weight<double>(dw, u, grad_of) * inv;
      if (!std::isfinite(contrib)) {
        throw NumericError("non-finite gradient contribution at " + to_string(u));
      }
      table[u] += contrib;
    }
  }
  for (auto& [u, v] : table) v = std::fabs(v);
  return table;
}

std::set<int> detect_anchors(const Weights& w, const std::vector<CalibrationBatch>& batches,
                             double anchor_fraction) {
  if (anchor_fraction < 0.0 || anchor_fraction >= 1.0) {
    throw InputError("anchor_fraction must be in [0, 1)");
  }
  const int n_anchors = static_cast<int>(
      std::ceil(anchor_fraction * static_cast<double>(w.config.n_layers)));
  if (n_anchors == 0) return {};
  if (batches.empty()) throw InputError("detect_anchors: no calibration batches");

  std::vector<TrainSequence> seqs;
  for (const auto& batch : batches) {
    for (const auto& inst : batch) seqs.push_back(to_train_sequence(inst));
  }
  const ViewExtents full = ViewExtents::full(w.config);
  const double base = eval_loss(w, full, nullptr, seqs);

  std::vector<std::pair<double, int>> deltas;  // (-delta, layer) for stable sort
  std::vector<char> skip(static_cast<size_t>(w.config.n_layers), 0);
  for (int l = 0; l < w.config.n_layers; ++l) {
    skip[static_cast<size_t>(l)] = 1;
    const double skipped = eval_loss(w, full, nullptr, seqs, &skip);
    skip[static_cast<size_t>(l)] = 0;
    deltas.emplace_back(-std::fabs(skipped - base), l);
  }
  std::stable_sort(deltas.begin(), deltas.end());
  std::set<int> anchors;
  for (int i = 0; i < n_anchors; ++i) anchors.insert(deltas[static_cast<size_t>(i)].second);
  return anchors;
}

std::vector<double> default_fractions() {
  return {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
}

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

int percent_of(double fraction) { return round_half_up(fraction * 100.0); }

}  // namespace

LevelTable build_level_table(const ModelConfig& config, const std::set<int>& anchors,
                             const std::vector<double>& fractions) {
  config.validate();
  if (fractions.empty()) throw InputError("level table needs at least one fraction");
  for (size_t i = 0; i < fractions.size(); ++i) {
    if (fractions[i] <= 0.0 || fractions[i] > 1.0) {
      throw InputError("level fractions must lie in (0, 1]");
    }
    if (i > 0 && fractions[i] <= fractions[i - 1]) {
      throw InputError("level fractions must be strictly ascending");
    }
  }
  if (percent_of(fractions.back()) != 100) {
    throw InputError("the last level must be the full model (fraction 1.0)");
  }
  for (int a : anchors) {
    if (a < 0 || a >= config.n_layers) throw InputError("anchor layer out of range");
  }

  const double total_layers = static_cast<double>(config.n_layers);
  const double anchor_count = static_cast<double>(anchors.size());

  LevelTable table;
  for (double s : fractions) {
    double r = 1.0;
    if (config.n_layers > static_cast<int>(anchors.size())) {
      r = (s * total_layers - anchor_count) / (total_layers - anchor_count);
    }
    if (s * total_layers <= anchor_count && percent_of(s) != 100) {
      throw InfeasibleLevelError(
          "level " + std::to_string(percent_of(s)) +
          "%: global fraction does not cover the anchor layers");
    }
    LevelEntry entry;
    entry.percent = percent_of(s);
    entry.fraction = s;
    entry.layers.resize(static_cast<size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
      auto& le = entry.layers[static_cast<size_t>(l)];
      if (anchors.count(l) || entry.percent == 100) {
        le = LayerExtents{config.n_heads, config.d_ff};
      } else {
        le.heads = std::min(config.n_heads,
                            std::max(1, round_half_up(r * config.n_heads)));
        le.neurons = std::min(config.d_ff, std::max(1, round_half_up(r * config.d_ff)));
      }
    }
    table.levels.push_back(std::move(entry));
  }

  // restore prefix nesting after rounding
  for (size_t i = 1; i < table.levels.size(); ++i) {
    for (size_t l = 0; l < table.levels[i].layers.size(); ++l) {
      auto& cur = table.levels[i].layers[l];
      const auto& prev = table.levels[i - 1].layers[l];
      cur.heads = std::max(cur.heads, prev.heads);
      cur.neurons = std::max(cur.neurons, prev.neurons);
    }
  }
  return table;
}

ElasticCheckpoint reorder_units(const Weights& w, const ImportanceTable& importance,
                                const std::set<int>& anchors, const LevelTable& levels) {
  for (const auto& u : enumerate_units(w.config)) {
    auto it = importance.find(u);
    if (it == importance.end()) {
      throw InputError("importance table is missing " + to_string(u));
    }
    if (!std::isfinite(it->second)) {
      throw NumericError("non-finite importance at " + to_string(u));
    }
  }

  ElasticCheckpoint ckpt;
  ckpt.weights = w;
  ckpt.importance = importance;
  ckpt.anchors = anchors;
  ckpt.levels = levels;
  ckpt.head_order.resize(static_cast<size_t>(w.config.n_layers));
  ckpt.neuron_order.resize(static_cast<size_t>(w.config.n_layers));

  auto sorted_order = [&](int layer, UnitKind kind, int count) {
    std::vector<int> order(static_cast<size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return importance.at({layer, kind, a}) > importance.at({layer, kind, b});
    });
    return order;
  };

  for (int l = 0; l < w.config.n_layers; ++l) {
    std::vector<int> horder(static_cast<size_t>(w.config.n_heads));
    std::iota(horder.begin(), horder.end(), 0);
    std::vector<int> norder(static_cast<size_t>(w.config.d_ff));
    std::iota(norder.begin(), norder.end(), 0);
    if (!anchors.count(l)) {
      horder = sorted_order(l, UnitKind::kAttentionHead, w.config.n_heads);
      norder = sorted_order(l, UnitKind::kMlpNeuron, w.config.d_ff);
      permute_block(ckpt.weights, l, UnitKind::kAttentionHead, horder);
      permute_block(ckpt.weights, l, UnitKind::kMlpNeuron, norder);
    }
    ckpt.head_order[static_cast<size_t>(l)] = std::move(horder);
    ckpt.neuron_order[static_cast<size_t>(l)] = std::move(norder);
  }
  return ckpt;
}

namespace {

AdapterSet make_adapters(const ModelConfig& cfg, const ViewExtents& ext, int rank,
                         uint64_t seed) {
  Rng rng(mix_seed(seed, 0xada9));
  AdapterSet set;
  set.rank = rank;
  set.layers.resize(static_cast<size_t>(cfg.n_layers));
  const double a_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model()));
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& la = set.layers[static_cast<size_t>(l)];
    const int64_t d = cfg.d_model();
    const int64_t aw = static_cast<int64_t>(ext.layers[static_cast<size_t>(l)].heads) *
                       cfg.head_dim;
    const int64_t an = ext.layers[static_cast<size_t>(l)].neurons;
    auto mk = [&](int64_t in, int64_t out) {
      Adapter ad;
      ad.a = TensorF::randn({rank, in}, rng, a_std);
      ad.b = TensorF({out, rank});  // zero: side branch starts as a no-op
      return ad;
    };
    la.wq = mk(d, aw);
    la.wk = mk(d, aw);
    la.wv = mk(d, aw);
    la.wo = mk(aw, d);
    if (cfg.mlp_kind == MlpKind::kGated) la.w_gate = mk(d, an);
    la.w_up = mk(d, an);
    la.w_down = mk(an, d);
  }
  return set;
}

}  // namespace

AdapterSet train_adapters(const ElasticCheckpoint& ckpt, int percent,
                          const std::vector<TaskInstance>& recovery,
                          const AdapterTrainOptions& opts) {
  if (opts.rank < 1) throw InputError("adapter rank must be >= 1");
  const ViewExtents ext = ckpt.extents_for(percent);
  AdapterSet set = make_adapters(ckpt.config(), ext, opts.rank, opts.seed);
  if (opts.steps == 0) return set;
  if (recovery.empty()) throw InputError("train_adapters: empty recovery set");

  const Weights sliced = slice_weights(ckpt.weights, ext);

  std::vector<Tensor<float>*> params;
  for (auto& la : set.layers) {
    for (Adapter* ad : {&la.wq, &la.wk, &la.wv, &la.wo, &la.w_gate, &la.w_up, &la.w_down}) {
      if (!ad->present()) continue;
      params.push_back(&ad->a);
      params.push_back(&ad->b);
    }
  }
  Adam<float> adam(params, opts.lr);
  std::vector<Tensor<float>> acc;
  for (auto* p : params) acc.emplace_back(p->shape());

  size_t cursor = 0;
  for (int step = 0; step < opts.steps; ++step) {
    for (auto& a : acc) a.fill(0.0f);
    double batch_loss = 0.0;
    for (int b = 0; b < opts.batch_size; ++b) {
      const TaskInstance& inst = recovery[cursor];
      cursor = (cursor + 1) % recovery.size();
      const TrainSequence seq = to_train_sequence(inst);
      Tape<float> tape;
      auto loss = build_loss<float>(tape, sliced, &set, seq, false, false);
      batch_loss += tape.scalar(loss);
      tape.backward(loss);
      for (size_t i = 0; i < params.size(); ++i) {
        const Tensor<float>& g = tape.grad(*params[i]);
        for (int64_t j = 0; j < g.numel(); ++j) acc[i][j] += g[j];
      }
    }
    if (!std::isfinite(batch_loss)) {
      throw TrainingError("train_adapters: loss diverged at level " +
                          std::to_string(percent));
    }
    const float inv = 1.0f / static_cast<float>(opts.batch_size);
    for (auto& a : acc) {
      for (int64_t j = 0; j < a.numel(); ++j) a[j] *= inv;
    }
    std::vector<const Tensor<float>*> gptrs;
    for (auto& a : acc) gptrs.push_back(&a);
    adam.step(gptrs);
    if (opts.verbose && step % 25 == 0) {
      std::printf("  level %d%% adapter step %4d loss %.4f\n", percent, step,
                  batch_loss / opts.batch_size);
      std::fflush(stdout);
    }
  }
  return set;
}

ElasticCheckpoint elastify(const Weights& w, const TaskParams& task,
                           const ElastifyOptions& opts) {
  std::vector<CalibrationBatch> batches;
  for (int b = 0; b < opts.calibration_batches; ++b) {
    batches.push_back(
        gen_tasks(task, mix_seed(opts.calibration_seed, b), opts.batch_instances));
  }
  if (opts.verbose) std::printf("profiling unit importance...\n");
  const ImportanceTable importance = profile_importance(w, batches);
  if (opts.verbose) std::printf("detecting anchor layers...\n");
  const std::set<int> anchors = detect_anchors(w, batches, opts.anchor_fraction);
  const std::vector<double> fracs =
      opts.fractions.empty() ? default_fractions() : opts.fractions;
  const LevelTable levels = build_level_table(w.config, anchors, fracs);
  ElasticCheckpoint ckpt = reorder_units(w, importance, anchors, levels);
  ckpt.adapter_rank = opts.adapter.rank;
  if (opts.train_recovery) {
    const auto recovery =
        gen_tasks(task, mix_seed(opts.calibration_seed, 0x5eC0), opts.recovery_instances);
    for (const auto& entry : levels.levels) {
      if (entry.percent == 100) continue;  // full model needs no recovery
      if (opts.verbose) std::printf("training adapters for level %d%%\n", entry.percent);
      AdapterTrainOptions a = opts.adapter;
      a.seed = mix_seed(opts.adapter.seed, static_cast<uint64_t>(entry.percent));
      ckpt.adapters[entry.percent] = train_adapters(ckpt, entry.percent, recovery, a);
    }
  }
  return ckpt;
}

}  // namespace elx
