// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "elx/autodiff.hpp"
#include "elx/engine.hpp"
#include "elx/model.hpp"
#include "elx/task.hpp"

namespace elx {

// Full-sequence forward on a tape; returns the logits node [T, vocab].
// Per-layer widths come from the weight tensors themselves, so a prefix
// sub-model is run simply by passing sliced weights. When `adapters` is
// non-null its a/b tensors are registered as tape params; backbone and
// embedding registration are opt-in so importance profiling and adapter
// recovery can freeze what they do not train.
template <typename T>
typename Tape<T>::Id build_logits(Tape<T>& tape, const WeightsT<T>& w,
                                  const AdapterSetT<T>* adapters,
                                  const std::vector<int>& tokens, bool backbone_params,
                                  bool embed_params);

// build_logits plus the masked-CE loss node for a teacher-forcing sequence.
template <typename T>
typename Tape<T>::Id build_loss(Tape<T>& tape, const WeightsT<T>& w,
                                const AdapterSetT<T>* adapters, const TrainSequence& seq,
                                bool backbone_params, bool embed_params);

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  // grads aligned with the params vector; applies one update.
  void step(const std::vector<const Tensor<T>*>& grads);
  void set_lr(double lr) { lr_ = lr; }
  const std::vector<Tensor<T>*>& params() const { return params_; }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

struct TrainToyOptions {
  int steps = 1500;
  int batch_size = 8;
  double lr = 1.5e-3;
  double grad_clip = 1.0;
  int eval_instances = 200;
  uint64_t data_seed = 11;
  bool verbose = false;
};

struct TrainReport {
  int steps = 0;
  double final_loss = 0.0;
  double eval_accuracy = 0.0;
};

// Fits the toy transformer on the synthetic lookup task with next-token
// loss over the answer span. Returns trained weights (float32 serving
// layout) and fills `report` when provided.
Weights train_toy(const ModelConfig& config, const TaskParams& task,
                  const TrainToyOptions& opts, TrainReport* report = nullptr);

// Greedy-decode accuracy of the serving path over a set of instances.
double answer_accuracy(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                       const std::vector<TaskInstance>& instances);

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace elx
