// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "elx/rng.hpp"

namespace elx {

// Synthetic key-value lookup task. A prompt lists key/value groups mixed
// with filler tokens and ends with a query marker plus one of the keys;
// the answer is that key's value tokens. Everything is seeded integer
// tokens, so correctness, retain labels and self-induced decision labels
// all have exact ground truth.
//
// Prompt shape:  [filler] k1 v.. ; [filler] k2 v.. ; ... ? kq
// Generation continues right after the queried key, so answering is a
// plain in-context copy of the tokens that followed kq earlier.
namespace tok {
constexpr int kPad = 0;
constexpr int kSep = 1;    // closes each key/value group
constexpr int kQuery = 2;  // question delimiter
constexpr int kEos = 3;
constexpr int kFirstDynamic = 8;
}  // namespace tok

struct TaskParams {
  int n_pairs = 5;
  int distractor_len = 20;  // max filler tokens per prompt
  int value_len = 2;        // answer tokens per value
  int n_keys = 24;
  int n_values = 24;
  int n_filler = 24;

  int key_base() const { return tok::kFirstDynamic; }
  int value_base() const { return key_base() + n_keys; }
  int filler_base() const { return value_base() + n_values; }
  int vocab_size() const { return filler_base() + n_filler; }
  // longest prompt this parameterization can emit
  int max_prompt_len() const { return distractor_len + n_pairs * (2 + value_len) + 2; }
  void validate() const;
};

struct TaskInstance {
  std::vector<int> prompt;
  std::vector<int> groundtruth;      // value tokens, no EOS
  std::vector<char> retain_labels;   // 1 = token belongs to the queried pair / query span
  std::vector<char> structural;      // 1 = delimiter token that must survive compression
};

TaskInstance gen_task(const TaskParams& params, uint64_t seed);

std::vector<TaskInstance> gen_tasks(const TaskParams& params, uint64_t seed, int count);

// Teacher-forcing sequence: prompt + groundtruth + EOS, with targets and a
// mask selecting the positions that predict the answer span.
struct TrainSequence {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<char> loss_mask;
};

TrainSequence to_train_sequence(const TaskInstance& inst);

}  // namespace elx
