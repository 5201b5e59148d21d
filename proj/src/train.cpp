// SPDX-License-Identifier: Apache-2.0
#include "elx/train.hpp"

#include <cmath>
#include <cstdio>

#include "elx/rng.hpp"

namespace elx {

template <typename T>
typename Tape<T>::Id build_logits(Tape<T>& tape, const WeightsT<T>& w,
                                  const AdapterSetT<T>* adapters,
                                  const std::vector<int>& tokens, bool backbone_params,
                                  bool embed_params) {
  using Id = typename Tape<T>::Id;
  const ModelConfig& cfg = w.config;
  const int hd = cfg.head_dim;
  constexpr double kRopeBase = 10000.0;
  const T eps = static_cast<T>(1e-6);

  auto reg = [&](const Tensor<T>& t, bool as_param) -> Id {
    return as_param ? tape.param(t)
                    : tape.constant(Tensor<T>(t.shape(),
                                              std::vector<T>(t.span().begin(),
                                                             t.span().end())));
  };

  Id emb = reg(w.embedding, embed_params);
  Id x = tape.embedding(emb, tokens);

  for (size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    const LayerAdaptersT<T>* la =
        (adapters && !adapters->empty()) ? &adapters->layers[l] : nullptr;
    const int heads = static_cast<int>(lw.wq.dim(0)) / hd;

    // weight_rows_are_outputs: wq/wk/wv/up/gate store row = output dim;
    // wo/w_down store row = input dim, so the active slice stays a leading
    // row block in both cases
    auto linear = [&](Id input, const Tensor<T>& weight, const Tensor<T>& bias,
                      const AdapterT<T>* ad, bool weight_rows_are_outputs) -> Id {
      Id w_id = reg(weight, backbone_params);
      Id y = weight_rows_are_outputs ? tape.matmul_nt(input, w_id)
                                     : tape.matmul(input, w_id);
      if (!bias.empty()) y = tape.add_row(y, reg(bias, backbone_params));
      if (ad && ad->present()) {
        Id xa = tape.matmul_nt(input, tape.param(ad->a));
        Id yb = tape.matmul_nt(xa, tape.param(ad->b));
        y = tape.add(y, yb);
      }
      return y;
    };

    Id xn = tape.rmsnorm(x, reg(lw.attn_norm_g, backbone_params), eps);
    Id q = linear(xn, lw.wq, lw.bq, la ? &la->wq : nullptr, true);
    Id k = linear(xn, lw.wk, lw.bk, la ? &la->wk : nullptr, true);
    Id v = linear(xn, lw.wv, lw.bv, la ? &la->wv : nullptr, true);
    if (cfg.use_rope) {
      q = tape.rope(q, hd, 0, kRopeBase);
      k = tape.rope(k, hd, 0, kRopeBase);
    }
    Id ctx = tape.causal_attention(q, k, v, heads);
    Id attn_out = linear(ctx, lw.wo, Tensor<T>(), la ? &la->wo : nullptr, false);
    x = tape.add(x, attn_out);

    Id xm = tape.rmsnorm(x, reg(lw.mlp_norm_g, backbone_params), eps);
    Id up = linear(xm, lw.w_up, lw.b_up, la ? &la->w_up : nullptr, true);
    Id h;
    if (cfg.mlp_kind == MlpKind::kGated) {
      Id gate = linear(xm, lw.w_gate, lw.b_gate, la ? &la->w_gate : nullptr, true);
      h = tape.mul(tape.silu(gate), up);
    } else {
      h = tape.gelu(up);
    }
    Id mlp_out = linear(h, lw.w_down, Tensor<T>(), la ? &la->w_down : nullptr, false);
    x = tape.add(x, mlp_out);
  }

  Id xf = tape.rmsnorm(x, reg(w.final_norm_g, backbone_params), eps);
  return tape.matmul_nt(xf, reg(w.lm_head, embed_params));
}

template <typename T>
typename Tape<T>::Id build_loss(Tape<T>& tape, const WeightsT<T>& w,
                                const AdapterSetT<T>* adapters, const TrainSequence& seq,
                                bool backbone_params, bool embed_params) {
  auto logits = build_logits(tape, w, adapters, seq.inputs, backbone_params, embed_params);
  return tape.cross_entropy_mean(logits, seq.targets, seq.loss_mask);
}

template typename Tape<float>::Id build_logits<float>(Tape<float>&, const WeightsT<float>&,
                                                      const AdapterSetT<float>*,
                                                      const std::vector<int>&, bool, bool);
template typename Tape<double>::Id build_logits<double>(Tape<double>&,
                                                        const WeightsT<double>&,
                                                        const AdapterSetT<double>*,
                                                        const std::vector<int>&, bool, bool);
template typename Tape<float>::Id build_loss<float>(Tape<float>&, const WeightsT<float>&,
                                                    const AdapterSetT<float>*,
                                                    const TrainSequence&, bool, bool);
template typename Tape<double>::Id build_loss<double>(Tape<double>&, const WeightsT<double>&,
                                                      const AdapterSetT<double>*,
                                                      const TrainSequence&, bool, bool);

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>*> params, double lr, double beta1, double beta2,
              double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor<T>* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

template <typename T>
void Adam<T>::step(const std::vector<const Tensor<T>*>& grads) {
  if (grads.size() != params_.size()) throw InputError("adam: grads/params mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = *params_[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = m_[i];
    Tensor<T>& v = v_[i];
    const int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj;
      const double vj = beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] -= static_cast<T>(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

double answer_accuracy(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                       const std::vector<TaskInstance>& instances) {
  if (instances.empty()) throw InputError("answer_accuracy: empty instance set");
  int correct = 0;
  for (const auto& inst : instances) {
    if (greedy_answer(w, ext, adapters, inst) == inst.groundtruth) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

Weights train_toy(const ModelConfig& config, const TaskParams& task,
                  const TrainToyOptions& opts, TrainReport* report) {
  if (config.vocab_size < task.vocab_size()) {
    throw InputError("model vocab smaller than task vocab");
  }
  Weights w = Weights::init(config);

  std::vector<Tensor<float>*> params;
  w.for_each_tensor([&](const std::string&, Tensor<float>& t) { params.push_back(&t); });
  Adam<float> adam(params, opts.lr);

  std::vector<Tensor<float>> acc;
  acc.reserve(params.size());
  for (auto* p : params) acc.emplace_back(p->shape());

  Rng data_rng(mix_seed(opts.data_seed, 0x7041));
  double last_loss = 0.0;
  for (int step = 0; step < opts.steps; ++step) {
    for (auto& a : acc) a.fill(0.0f);
    double batch_loss = 0.0;
    for (int b = 0; b < opts.batch_size; ++b) {
      const TaskInstance inst = gen_task(task, data_rng.next_u64());
      const TrainSequence seq = to_train_sequence(inst);
      Tape<float> tape;
      auto loss = build_loss<float>(tape, w, nullptr, seq, true, true);
      batch_loss += tape.scalar(loss);
      tape.backward(loss);
      for (size_t i = 0; i < params.size(); ++i) {
        const Tensor<float>& g = tape.grad(*params[i]);
        float* dst = acc[i].data();
        const float* src = g.data();
        for (int64_t j = 0; j < g.numel(); ++j) dst[j] += src[j];
      }
    }
    last_loss = batch_loss / opts.batch_size;
    if (!std::isfinite(last_loss)) throw TrainingError("train_toy: loss diverged");

    const float inv = 1.0f / static_cast<float>(opts.batch_size);
    double sq = 0.0;
    for (auto& a : acc) {
      for (int64_t j = 0; j < a.numel(); ++j) {
        a[j] *= inv;
        sq += static_cast<double>(a[j]) * a[j];
      }
    }
    const double norm = std::sqrt(sq);
    if (opts.grad_clip > 0 && norm > opts.grad_clip) {
      const float s = static_cast<float>(opts.grad_clip / norm);
      for (auto& a : acc) {
        for (int64_t j = 0; j < a.numel(); ++j) a[j] *= s;
      }
    }
    std::vector<const Tensor<float>*> gptrs;
    gptrs.reserve(acc.size());
    for (auto& a : acc) gptrs.push_back(&a);
    adam.step(gptrs);

    if (opts.verbose && (step % 50 == 0 || step + 1 == opts.steps)) {
      std::printf("step %5d  loss %.4f\n", step, last_loss);
      std::fflush(stdout);
    }
  }

  if (report) {
    report->steps = opts.steps;
    report->final_loss = last_loss;
    if (opts.eval_instances > 0) {
      const auto eval =
          gen_tasks(task, mix_seed(opts.data_seed, 0xe7a1), opts.eval_instances);
      report->eval_accuracy = answer_accuracy(w, ViewExtents::full(config), nullptr, eval);
    }
  }
  return w;
}

}  // namespace elx
