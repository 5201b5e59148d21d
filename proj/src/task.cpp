// SPDX-License-Identifier: Apache-2.0
#include "elx/task.hpp"

#include "elx/errors.hpp"

namespace elx {

void TaskParams::validate() const {
  if (n_pairs < 1) throw InputError("task: n_pairs must be >= 1");
  if (n_pairs > n_keys) throw InputError("task: n_pairs exceeds key vocabulary");
  if (value_len < 1) throw InputError("task: value_len must be >= 1");
  if (distractor_len < 0) throw InputError("task: negative distractor_len");
  if (n_keys < 1 || n_values < 1 || n_filler < 1) {
    throw InputError("task: vocabulary ranges must be non-empty");
  }
}

TaskInstance gen_task(const TaskParams& params, uint64_t seed) {
  params.validate();
  Rng rng(seed);

  // sample distinct keys
  std::vector<int> keys(params.n_keys);
  for (int i = 0; i < params.n_keys; ++i) keys[i] = params.key_base() + i;
  rng.shuffle(keys);
  keys.resize(params.n_pairs);

  std::vector<std::vector<int>> values(params.n_pairs);
  for (auto& v : values) {
    v.resize(params.value_len);
    for (auto& t : v) t = params.value_base() + rng.below_int(params.n_values);
  }
  const int query = rng.below_int(params.n_pairs);

  // distribute filler into the gaps before each pair and before the query
  const int total_filler =
      params.distractor_len == 0
          ? 0
          : params.distractor_len / 2 + rng.below_int(params.distractor_len / 2 + 1);
  std::vector<int> gap_fill(params.n_pairs + 1, 0);
  for (int i = 0; i < total_filler; ++i) gap_fill[rng.below_int(params.n_pairs + 1)]++;

  TaskInstance inst;
  auto emit = [&](int token, char retain, char structural) {
    inst.prompt.push_back(token);
    inst.retain_labels.push_back(retain);
    inst.structural.push_back(structural);
  };
  for (int p = 0; p < params.n_pairs; ++p) {
    const char keep = (p == query) ? 1 : 0;
    for (int f = 0; f < gap_fill[p]; ++f) {
      emit(params.filler_base() + rng.below_int(params.n_filler), 0, 0);
    }
    emit(keys[p], keep, 0);
    for (int t : values[p]) emit(t, keep, 0);
    emit(tok::kSep, 0, 0);
  }
  for (int f = 0; f < gap_fill[params.n_pairs]; ++f) {
    emit(params.filler_base() + rng.below_int(params.n_filler), 0, 0);
  }
  emit(tok::kQuery, 1, 1);
  emit(keys[query], 1, 1);  // the query key must survive compression

  inst.groundtruth = values[query];
  return inst;
}

std::vector<TaskInstance> gen_tasks(const TaskParams& params, uint64_t seed, int count) {
  std::vector<TaskInstance> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(gen_task(params, mix_seed(seed, i)));
  return out;
}

TrainSequence to_train_sequence(const TaskInstance& inst) {
  TrainSequence seq;
  seq.inputs = inst.prompt;
  seq.inputs.insert(seq.inputs.end(), inst.groundtruth.begin(), inst.groundtruth.end());
  seq.inputs.push_back(tok::kEos);
  const size_t n = seq.inputs.size() - 1;  // positions with a next-token target
  seq.targets.resize(n);
  seq.loss_mask.resize(n);
  for (size_t i = 0; i < n; ++i) {
    seq.targets[i] = seq.inputs[i + 1];
    // answer span: targets drawn from groundtruth plus the closing EOS
    seq.loss_mask[i] = (i + 1 >= inst.prompt.size()) ? 1 : 0;
  }
  seq.inputs.pop_back();  // inputs align with targets
  return seq;
}

}  // namespace elx
