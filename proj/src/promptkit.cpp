// SPDX-License-Identifier: Apache-2.0
#include "elx/promptkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "elx/errors.hpp"

namespace elx {

Scorer Scorer::uniform() {
  Scorer s;
  s.kind_ = Kind::kUniform;
  return s;
}

Scorer Scorer::heuristic(const TaskParams& task) {
  Scorer s;
  s.kind_ = Kind::kHeuristic;
  s.task_ = task;
  return s;
}

Scorer Scorer::learned(const TaskParams& task, std::vector<double> weights) {
  if (static_cast<int>(weights.size()) != kFeatureCount) {
    throw InputError("learned scorer expects " + std::to_string(kFeatureCount) +
                     " weights");
  }
  Scorer s;
  s.kind_ = Kind::kLearned;
  s.task_ = task;
  s.weights_ = std::move(weights);
  return s;
}

namespace {

// distance from each position to the nearest occurrence of the queried key
std::vector<int> query_key_distances(std::span<const int> prompt) {
  const int n = static_cast<int>(prompt.size());
  int qkey = -1;
  for (int i = n - 1; i > 0; --i) {
    if (prompt[static_cast<size_t>(i - 1)] == tok::kQuery) {
      qkey = prompt[static_cast<size_t>(i)];
      break;
    }
  }
  std::vector<int> dist(static_cast<size_t>(n), n);
  if (qkey < 0) return dist;
  int last = -1;
  for (int i = 0; i < n; ++i) {
    if (prompt[static_cast<size_t>(i)] == qkey) last = i;
    if (last >= 0) dist[static_cast<size_t>(i)] = i - last;
  }
  int next = -1;
  for (int i = n - 1; i >= 0; --i) {
    if (prompt[static_cast<size_t>(i)] == qkey) next = i;
    if (next >= 0) dist[static_cast<size_t>(i)] = std::min(dist[static_cast<size_t>(i)], next - i);
  }
  return dist;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void Scorer::features(const TaskParams& task, std::span<const int> prompt, size_t pos,
                      double* out) {
  static thread_local std::vector<int> dist_cache;
  static thread_local std::vector<int> prompt_cache;
  if (prompt_cache.size() != prompt.size() ||
      !std::equal(prompt.begin(), prompt.end(), prompt_cache.begin())) {
    prompt_cache.assign(prompt.begin(), prompt.end());
    dist_cache = query_key_distances(prompt);
  }
  const int t = prompt[pos];
  const int d = dist_cache[pos];
  const bool structural = t == tok::kQuery || pos + 1 == prompt.size();
  out[0] = 1.0;
  out[1] = structural ? 1.0 : 0.0;
  out[2] = d == 0 ? 1.0 : 0.0;
  out[3] = 1.0 / (1.0 + d);
  out[4] = d <= 1 ? 1.0 : 0.0;
  out[5] = d <= 2 ? 1.0 : 0.0;
  out[6] = d <= 1 + task.value_len ? 1.0 : 0.0;
  out[7] = (t >= task.key_base() && t < task.value_base()) ? 1.0 : 0.0;
  out[8] = (t >= task.value_base() && t < task.filler_base()) ? 1.0 : 0.0;
  out[9] = prompt.size() > 1
               ? static_cast<double>(pos) / static_cast<double>(prompt.size() - 1)
               : 0.0;
}

TokenScores Scorer::score(std::span<const int> prompt) const {
  if (prompt.empty()) throw InputError("score_tokens: empty prompt");
  TokenScores scores;
  scores.values.resize(prompt.size());
  switch (kind_) {
    case Kind::kUniform:
      std::fill(scores.values.begin(), scores.values.end(), 0.5);
      break;
    case Kind::kHeuristic: {
      const std::vector<int> dist = query_key_distances(prompt);
      for (size_t i = 0; i < prompt.size(); ++i) {
        const bool structural = prompt[i] == tok::kQuery || i + 1 == prompt.size();
        const double near = 1.0 / (1.0 + dist[i]);
        scores.values[i] = structural ? 1.0 : near;
      }
      break;
    }
    case Kind::kLearned: {
      double f[kFeatureCount];
      for (size_t i = 0; i < prompt.size(); ++i) {
        features(task_, prompt, i, f);
        double z = 0.0;
        for (int j = 0; j < kFeatureCount; ++j) z += weights_[static_cast<size_t>(j)] * f[j];
        scores.values[i] = sigmoid(z);
      }
      break;
    }
  }
  return scores;
}

Scorer train_scorer(const TaskParams& task, const ScorerTrainOptions& opts) {
  std::vector<std::array<double, Scorer::kFeatureCount>> xs;
  std::vector<char> ys;
  for (int p = 0; p < opts.n_prompts; ++p) {
    const TaskInstance inst = gen_task(task, mix_seed(opts.seed, p));
    for (size_t i = 0; i < inst.prompt.size(); ++i) {
      std::array<double, Scorer::kFeatureCount> f{};
      Scorer::features(task, inst.prompt, i, f.data());
      xs.push_back(f);
      ys.push_back(inst.retain_labels[i]);
    }
  }
  std::vector<double> w(Scorer::kFeatureCount, 0.0);
  const double n_inv = 1.0 / static_cast<double>(xs.size());
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<double> grad(Scorer::kFeatureCount, 0.0);
    for (size_t i = 0; i < xs.size(); ++i) {
      double z = 0.0;
      for (int j = 0; j < Scorer::kFeatureCount; ++j) z += w[static_cast<size_t>(j)] * xs[i][static_cast<size_t>(j)];
      const double err = sigmoid(z) - (ys[i] ? 1.0 : 0.0);
      for (int j = 0; j < Scorer::kFeatureCount; ++j) {
        grad[static_cast<size_t>(j)] += err * xs[i][static_cast<size_t>(j)];
      }
    }
    for (int j = 0; j < Scorer::kFeatureCount; ++j) {
      w[static_cast<size_t>(j)] -= opts.lr * grad[static_cast<size_t>(j)] * n_inv;
    }
  }
  return Scorer::learned(task, std::move(w));
}

std::vector<size_t> compress_indices(size_t prompt_len, const TokenScores& scores,
                                     double level, const std::vector<char>* always_keep) {
  if (prompt_len == 0) throw InputError("compress: empty prompt");
  if (scores.values.size() != prompt_len) {
    throw InputError("compress: scores length does not match prompt");
  }
  if (!(level > 0.0 && level <= 1.0)) throw InputError("compress: level must be in (0, 1]");
  for (double v : scores.values) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw InputError("compress: scores must be finite in [0, 1]");
    }
  }
  const size_t target = std::max<size_t>(
      1, static_cast<size_t>(std::floor(level * static_cast<double>(prompt_len))));

  std::vector<char> keep(prompt_len, 0);
  size_t kept = 0;
  if (always_keep) {
    for (size_t i = 0; i < prompt_len; ++i) {
      if ((*always_keep)[i]) {
        keep[i] = 1;
        ++kept;
      }
    }
  }
  if (kept < target) {
    std::vector<size_t> order;
    order.reserve(prompt_len);
    for (size_t i = 0; i < prompt_len; ++i) {
      if (!keep[i]) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (scores.values[a] != scores.values[b]) return scores.values[a] > scores.values[b];
      return a < b;  // ties break toward earlier positions
    });
    for (size_t i = 0; i < order.size() && kept < target; ++i) {
      keep[order[i]] = 1;
      ++kept;
    }
  }
  std::vector<size_t> out;
  out.reserve(kept);
  for (size_t i = 0; i < prompt_len; ++i) {
    if (keep[i]) out.push_back(i);
  }
  return out;
}

std::vector<int> compress(std::span<const int> prompt, const TokenScores& scores,
                          double level, const std::vector<char>* always_keep) {
  const std::vector<size_t> idx =
      compress_indices(prompt.size(), scores, level, always_keep);
  std::vector<int> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(prompt[i]);
  return out;
}

std::vector<char> structural_mask(std::span<const int> prompt) {
  std::vector<char> mask(prompt.size(), 0);
  for (size_t i = 0; i < prompt.size(); ++i) {
    // the question delimiter and the trailing query key must stay
    mask[i] = (prompt[i] == tok::kQuery || i + 1 == prompt.size()) ? 1 : 0;
  }
  return mask;
}

}  // namespace elx
