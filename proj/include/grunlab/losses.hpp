#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "grunlab/model.hpp"
#include "grunlab/optim.hpp"

namespace grunlab {

enum class UnlearnMethod { kGa, kGd, kNpo, kIdk, kRmu };
enum class UnlearnMode { kGrun, kReftOnly, kGrunNoGateLoss, kVanilla };

std::string method_name(UnlearnMethod m);
UnlearnMethod method_from_name(const std::string& name);
std::string mode_name(UnlearnMode m);
UnlearnMode mode_from_name(const std::string& name);

struct UnlearnConfig {
  UnlearnMethod method = UnlearnMethod::kGd;
  UnlearnMode mode = UnlearnMode::kGrun;
  double lambda = 1.0;        // retain weight in L_u
  double beta = 0.1;          // NPO inverse temperature
  int rmu_layer = 0;          // 0: middle gated layer (or middle of model)
  double rmu_coeff = 10.0;    // steering magnitude
  double rmu_alpha = 100.0;   // RMU retain weight
  size_t epochs = 40;
  double early_stop_tau = 0;  // <=0: 2 * ln(vocab_size)
  double learning_rate = 1e-2;
  // Full-model fine-tuning moves much faster than intervention training,
  // so the vanilla baseline gets its own step size.
  double vanilla_learning_rate = 3e-4;
  size_t batch_per_side = 4;  // equal target / retain counts per step
  uint64_t seed = 0;

  void validate() const {
    if (lambda < 0) throw ConfigError("unlearn: lambda must be >= 0");
    if (!(beta > 0)) throw ConfigError("unlearn: beta must be positive");
    if (!(rmu_coeff > 0)) throw ConfigError("unlearn: rmu_coeff must be positive");
    if (!(rmu_alpha > 0)) throw ConfigError("unlearn: rmu_alpha must be positive");
    if (epochs < 1) throw ConfigError("unlearn: epochs must be positive");
    if (!(learning_rate > 0))
      throw ConfigError("unlearn: learning rate must be positive");
    if (batch_per_side < 1)
      throw ConfigError("unlearn: batch size must be positive");
  }
};

// Tokenized example; `index` is its stable position inside its split and
// binds IDK refusal templates (index mod pool size).
struct TokenExample {
  std::vector<int> prompt;
  std::vector<int> answer;
  int gate_label = 0;
  size_t index = 0;
};

template <class S>
struct LossValue {
  Tensor<S> loss;                      // L_u graph scalar
  double forget_term = 0.0;            // value of the forgetting component
  double target_nll = 0.0;             // mean answer NLL on target batch
  double retain_nll = 0.0;             // mean answer NLL on retain batch
};

// Shared forward context: which model, whether interventions apply, and an
// optional sink for gate readings paired with gate labels.
template <class S>
struct LossContext {
  const Model<S>& model;
  const GrunStack<S>* stack = nullptr;
  GateOverride override_mode = GateOverride::kNone;
  std::vector<Tensor<S>>* gate_outputs = nullptr;
  std::vector<int>* gate_labels = nullptr;
};

namespace detail_loss {

template <class S>
Tensor<S> example_nll(const LossContext<S>& ctx, const TokenExample& ex,
                      ops::Reduction reduction = ops::Reduction::kMean,
                      ForwardResult<S>* fwd_out = nullptr) {
  HookSpec<S> spec;
  const HookSpec<S>* hooks = nullptr;
  if (ctx.stack != nullptr && !ctx.stack->empty()) {
    spec.stack = ctx.stack;
    spec.position = ex.prompt.size() - 1;
    spec.override_mode = ctx.override_mode;
    hooks = &spec;
  }
  ForwardResult<S> fwd;
  Tensor<S> nll =
      sequence_nll_graph(ctx.model, ex.prompt, ex.answer, hooks, reduction,
                         &fwd);
  if (ctx.gate_outputs != nullptr) {
    for (const auto& g : fwd.gates) {
      ctx.gate_outputs->push_back(g.value);
      ctx.gate_labels->push_back(ex.gate_label);
    }
  }
  if (fwd_out) *fwd_out = std::move(fwd);
  return nll;
}

template <class S>
Tensor<S> batch_mean_nll(const LossContext<S>& ctx,
                         const std::vector<TokenExample>& batch) {
  std::vector<Tensor<S>> nlls;
  nlls.reserve(batch.size());
  for (const auto& ex : batch) nlls.push_back(example_nll(ctx, ex));
  return ops::mean_list(nlls);
}

}  // namespace detail_loss

// Gradient difference: -mean NLL(target) + lambda * mean NLL(retain).
// lambda = 0 reduces to plain gradient ascent and permits an empty retain
// batch.
template <class S>
LossValue<S> gd_loss(const LossContext<S>& ctx,
                     const std::vector<TokenExample>& targets,
                     const std::vector<TokenExample>& retains, double lambda) {
  if (lambda < 0) throw ConfigError("gd_loss: lambda must be >= 0");
  if (targets.empty()) throw std::invalid_argument("gd_loss: empty target batch");
  if (retains.empty() && lambda != 0)
    throw std::invalid_argument("gd_loss: empty retain batch with lambda != 0");
  LossValue<S> out;
  Tensor<S> t_nll = detail_loss::batch_mean_nll(ctx, targets);
  out.target_nll = static_cast<double>(t_nll.item());
  out.forget_term = -out.target_nll;
  Tensor<S> loss = ops::neg(t_nll);
  if (lambda != 0) {
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
    loss = ops::add(loss, ops::scale(r_nll, static_cast<S>(lambda)));
  } else if (!retains.empty()) {
    // Still run retain forwards so gate supervision sees both labels.
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
  }
  out.loss = loss;
  return out;
}

// NPO: (2/beta) * mean log(1 + (pi_theta / pi_ref)^beta) on target data,
// with sequence-level log-probabilities, plus the usual retain term. The
// reference log-probs come from the pre-unlearning model (hooks detached).
template <class S>
LossValue<S> npo_loss(const LossContext<S>& ctx,
                      const std::vector<double>& ref_logprobs,
                      const std::vector<TokenExample>& targets,
                      const std::vector<TokenExample>& retains, double lambda,
                      double beta) {
  if (!(beta > 0)) throw ConfigError("npo_loss: beta must be positive");
  if (targets.empty()) throw std::invalid_argument("npo_loss: empty target batch");
  if (ref_logprobs.size() != targets.size())
    throw std::invalid_argument(
        "npo_loss: reference log-probs must align with the target batch");
  LossValue<S> out;
  std::vector<Tensor<S>> terms;
  std::vector<Tensor<S>> mean_nlls;
  terms.reserve(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    Tensor<S> nll_sum =
        detail_loss::example_nll(ctx, targets[i], ops::Reduction::kSum);
    // log pi_theta = -sum NLL; delta = log pi_theta - log pi_ref
    Tensor<S> delta = ops::sub(
        ops::neg(nll_sum),
        Tensor<S>::scalar(static_cast<S>(ref_logprobs[i])));
    terms.push_back(ops::softplus(ops::scale(delta, static_cast<S>(beta))));
    mean_nlls.push_back(
        ops::scale(nll_sum, S(1) / static_cast<S>(targets[i].answer.size())));
  }
  Tensor<S> forget =
      ops::scale(ops::mean_list(terms), static_cast<S>(2.0 / beta));
  out.forget_term = static_cast<double>(forget.item());
  out.target_nll = static_cast<double>(ops::mean_list(mean_nlls).item());
  Tensor<S> loss = forget;
  if (!retains.empty() && lambda != 0) {
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
    loss = ops::add(loss, ops::scale(r_nll, static_cast<S>(lambda)));
  } else if (!retains.empty()) {
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
  }
  out.loss = loss;
  return out;
}

// IDK: train target prompts toward refusal templates, assigned
// deterministically by example index mod pool size.
template <class S>
LossValue<S> idk_loss(const LossContext<S>& ctx,
                      const std::vector<TokenExample>& targets,
                      const std::vector<TokenExample>& retains, double lambda,
                      const std::vector<std::vector<int>>& template_answers) {
  if (template_answers.empty())
    throw ConfigError("idk_loss: empty refusal template pool");
  if (targets.empty()) throw std::invalid_argument("idk_loss: empty target batch");
  LossValue<S> out;
  std::vector<Tensor<S>> nlls;
  nlls.reserve(targets.size());
  for (const auto& ex : targets) {
    TokenExample refusal = ex;
    refusal.answer = template_answers[ex.index % template_answers.size()];
    nlls.push_back(detail_loss::example_nll(ctx, refusal));
  }
  Tensor<S> forget = ops::mean_list(nlls);
  out.forget_term = static_cast<double>(forget.item());
  out.target_nll = out.forget_term;
  Tensor<S> loss = forget;
  if (!retains.empty() && lambda != 0) {
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
    loss = ops::add(loss, ops::scale(r_nll, static_cast<S>(lambda)));
  } else if (!retains.empty()) {
    Tensor<S> r_nll = detail_loss::batch_mean_nll(ctx, retains);
    out.retain_nll = static_cast<double>(r_nll.item());
  }
  out.loss = loss;
  return out;
}

// RMU: push the intervened last-prompt-token state at `layer` toward
// coeff * u on target data, and pin retain states to the frozen model.
template <class S>
LossValue<S> rmu_loss(const LossContext<S>& ctx,
                      const std::vector<std::vector<S>>& frozen_retain_states,
                      const std::vector<TokenExample>& targets,
                      const std::vector<TokenExample>& retains, size_t layer,
                      double coeff, double alpha, const std::vector<S>& u) {
  if (!(coeff > 0)) throw ConfigError("rmu_loss: coeff must be positive");
  if (targets.empty()) throw std::invalid_argument("rmu_loss: empty target batch");
  if (frozen_retain_states.size() != retains.size())
    throw std::invalid_argument(
        "rmu_loss: frozen states must align with the retain batch");
  const size_t d = ctx.model.config().d_model;
  if (u.size() != d)
    throw std::invalid_argument("rmu_loss: steering vector length mismatch");

  std::vector<S> steer(d);
  for (size_t j = 0; j < d; ++j) steer[j] = static_cast<S>(coeff) * u[j];
  Tensor<S> steer_row = Tensor<S>::from_data({1, d}, steer);

  auto state_row = [&](const TokenExample& ex, ForwardResult<S>& fwd) {
    return fwd.state_row(layer, ex.prompt.size() - 1);
  };

  LossValue<S> out;
  std::vector<Tensor<S>> forget_terms, nll_terms;
  for (const auto& ex : targets) {
    ForwardResult<S> fwd;
    Tensor<S> nll = detail_loss::example_nll(ctx, ex, ops::Reduction::kMean,
                                             &fwd);
    nll_terms.push_back(nll);
    Tensor<S> diff = ops::sub(state_row(ex, fwd), steer_row);
    forget_terms.push_back(ops::mean(ops::mul(diff, diff)));
  }
  Tensor<S> forget = ops::mean_list(forget_terms);
  out.forget_term = static_cast<double>(forget.item());
  out.target_nll = static_cast<double>(ops::mean_list(nll_terms).item());

  Tensor<S> loss = forget;
  if (!retains.empty()) {
    std::vector<Tensor<S>> retain_terms;
    std::vector<Tensor<S>> retain_nlls;
    for (size_t i = 0; i < retains.size(); ++i) {
      ForwardResult<S> fwd;
      retain_nlls.push_back(detail_loss::example_nll(
          ctx, retains[i], ops::Reduction::kMean, &fwd));
      Tensor<S> frozen =
          Tensor<S>::from_data({1, d}, frozen_retain_states[i]);
      Tensor<S> diff = ops::sub(state_row(retains[i], fwd), frozen);
      retain_terms.push_back(ops::mean(ops::mul(diff, diff)));
    }
    out.retain_nll = static_cast<double>(ops::mean_list(retain_nlls).item());
    loss = ops::add(loss, ops::scale(ops::mean_list(retain_terms),
                                     static_cast<S>(alpha)));
  }
  out.loss = loss;
  return out;
}

// Mean binary cross-entropy of gate outputs against split labels, outputs
// clamped to [1e-7, 1 - 1e-7].
template <class S>
Tensor<S> gate_loss(const std::vector<Tensor<S>>& outputs,
                    const std::vector<int>& labels) {
  if (outputs.empty())
    throw std::invalid_argument("gate_loss: no gate outputs");
  if (outputs.size() != labels.size())
    throw std::invalid_argument("gate_loss: outputs and labels differ");
  std::vector<Tensor<S>> terms;
  terms.reserve(outputs.size());
  const S lo = S(1e-7), hi = S(1) - S(1e-7);
  for (size_t i = 0; i < outputs.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw std::invalid_argument("gate_loss: label " +
                                  std::to_string(labels[i]) +
                                  " outside {0,1}");
    Tensor<S> g = ops::reshape(outputs[i], {1});
    if (labels[i] == 1) {
      terms.push_back(ops::neg(ops::log(ops::clamp(g, lo, hi))));
    } else {
      Tensor<S> om = ops::sub(Tensor<S>::scalar(S(1)), g);
      terms.push_back(ops::neg(ops::log(ops::clamp(om, lo, hi))));
    }
  }
  return ops::mean_list(terms);
}

struct StepRecord {
  size_t step = 0;
  double l_u = 0.0;
  double l_g = 0.0;  // NaN when the mode trains without gate loss
  double target_nll = 0.0;
  double retain_nll = 0.0;
  double gate_mean_target = 0.0;  // NaN when gates are not evaluated
  double gate_mean_retain = 0.0;
  bool stopped_early = false;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  bool stopped_early = false;
};

// Sequence log-probability (sum over answer tokens) of each example under
// the bare model, used as the NPO reference and for frozen-state snapshots.
template <class S>
std::vector<double> reference_logprobs(const Model<S>& model,
                                       const std::vector<TokenExample>& batch) {
  NoGradGuard ng;
  std::vector<double> out;
  out.reserve(batch.size());
  const HookSpec<S>* no_hooks = nullptr;
  for (const auto& ex : batch) {
    Tensor<S> nll = sequence_nll_graph(model, ex.prompt, ex.answer, no_hooks,
                                       ops::Reduction::kSum);
    out.push_back(-static_cast<double>(nll.item()));
  }
  return out;
}

template <class S>
std::vector<std::vector<S>> frozen_layer_states(
    const Model<S>& model, const std::vector<TokenExample>& batch,
    size_t layer) {
  NoGradGuard ng;
  std::vector<std::vector<S>> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) {
    std::vector<int> tokens = ex.prompt;
    tokens.insert(tokens.end(), ex.answer.begin(), ex.answer.end());
    ForwardResult<S> fwd = model.forward(tokens, nullptr);
    out.push_back(fwd.state_row(layer, ex.prompt.size() - 1).value());
  }
  return out;
}

// Resolved RMU layer: explicit when positive, else the middle gated layer
// (or the middle of the model when no stack is present).
template <class S>
size_t resolve_rmu_layer(const UnlearnConfig& cfg, const GrunStack<S>* stack,
                         const Model<S>& model) {
  if (cfg.rmu_layer > 0) return static_cast<size_t>(cfg.rmu_layer);
  if (stack != nullptr && !stack->empty()) {
    auto layers = stack->layer_set();
    auto it = layers.begin();
    std::advance(it, layers.size() / 2);
    return *it;
  }
  return std::max<size_t>(1, model.config().n_layers / 2);
}

// Unlearning fine-tune driver. grun modes train only the newest request's
// intervention parameters and leave every base tensor untouched; vanilla
// updates the model itself. GD (and GA) stop at the first step whose batch
// target NLL exceeds the early-stop threshold.
template <class S>
TrainLog train_unlearn(const Model<S>& model, GrunStack<S>* stack,
                       size_t request, std::vector<TokenExample> targets,
                       std::vector<TokenExample> retains,
                       const std::vector<std::vector<int>>& idk_templates,
                       const UnlearnConfig& cfg) {
  cfg.validate();
  const bool grun_mode = cfg.mode != UnlearnMode::kVanilla;
  if (grun_mode && (stack == nullptr || stack->empty()))
    throw std::invalid_argument("train_unlearn: mode requires a grun stack");
  if (targets.empty()) throw DataError("train_unlearn: no target examples");
  if (retains.empty()) throw DataError("train_unlearn: no retain examples");

  // Trainable set per mode.
  std::vector<Tensor<S>> trainables;
  if (cfg.mode == UnlearnMode::kVanilla) {
    model.set_trainable(true);
    trainables = model.parameters();
  } else {
    model.set_trainable(false);
    for (size_t j = 0; j < stack->size(); ++j)
      stack->set_request_trainable(j, false);
    trainables = stack->request_parameters(
        request, cfg.mode == UnlearnMode::kReftOnly);
    for (const auto& p : trainables) p.set_requires_grad(true);
  }

  Optimizer<S> opt(OptimizerKind::kAdam, static_cast<S>(cfg.learning_rate));
  opt.add_parameters(trainables);

  const double tau = cfg.early_stop_tau > 0
                         ? cfg.early_stop_tau
                         : 2.0 * std::log(static_cast<double>(
                                   model.config().vocab_size));

  // Frozen references, computed before any parameter moves.
  std::vector<double> ref_logprobs;
  std::vector<std::vector<S>> frozen_retain;
  std::vector<S> rmu_u;
  size_t rmu_layer = 0;
  Rng rng(cfg.seed ^ 0x756e6c6561726eull);
  if (cfg.method == UnlearnMethod::kNpo)
    ref_logprobs = reference_logprobs(model, targets);
  if (cfg.method == UnlearnMethod::kRmu) {
    rmu_layer = resolve_rmu_layer(cfg, grun_mode ? stack : nullptr, model);
    frozen_retain = frozen_layer_states(model, retains, rmu_layer);
    rmu_u.resize(model.config().d_model);
    double norm = 0;
    for (auto& v : rmu_u) {
      v = static_cast<S>(rng.gaussian());
      norm += static_cast<double>(v) * static_cast<double>(v);
    }
    norm = std::sqrt(norm);
    for (auto& v : rmu_u) v = static_cast<S>(v / norm);
  }

  TrainLog log;
  size_t step_no = 0;
  const size_t bs = std::min(cfg.batch_per_side, targets.size());
  std::vector<size_t> retain_order(retains.size());
  for (size_t i = 0; i < retain_order.size(); ++i) retain_order[i] = i;
  size_t retain_cursor = retains.size();  // trigger reshuffle on first use

  for (size_t epoch = 0; epoch < cfg.epochs && !log.stopped_early; ++epoch) {
    std::vector<size_t> order(targets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t start = 0; start < order.size() && !log.stopped_early;
         start += bs) {
      std::vector<TokenExample> tb, rb;
      std::vector<double> tb_ref;
      std::vector<std::vector<S>> rb_frozen;
      for (size_t i = start; i < std::min(start + bs, order.size()); ++i) {
        tb.push_back(targets[order[i]]);
        if (!ref_logprobs.empty()) tb_ref.push_back(ref_logprobs[order[i]]);
      }
      for (size_t i = 0; i < tb.size(); ++i) {
        if (retain_cursor >= retains.size()) {
          rng.shuffle(retain_order);
          retain_cursor = 0;
        }
        const size_t ri = retain_order[retain_cursor++];
        rb.push_back(retains[ri]);
        if (!frozen_retain.empty()) rb_frozen.push_back(frozen_retain[ri]);
      }

      std::vector<Tensor<S>> gate_outputs;
      std::vector<int> gate_labels;
      LossContext<S> ctx{model, grun_mode ? stack : nullptr,
                         cfg.mode == UnlearnMode::kReftOnly
                             ? GateOverride::kFullyOpen
                             : GateOverride::kNone,
                         &gate_outputs, &gate_labels};

      LossValue<S> lu;
      switch (cfg.method) {
        case UnlearnMethod::kGa:
          lu = gd_loss(ctx, tb, rb, 0.0);
          break;
        case UnlearnMethod::kGd:
          lu = gd_loss(ctx, tb, rb, cfg.lambda);
          break;
        case UnlearnMethod::kNpo:
          lu = npo_loss(ctx, tb_ref, tb, rb, cfg.lambda, cfg.beta);
          break;
        case UnlearnMethod::kIdk:
          lu = idk_loss(ctx, tb, rb, cfg.lambda, idk_templates);
          break;
        case UnlearnMethod::kRmu:
          lu = rmu_loss(ctx, rb_frozen, tb, rb, rmu_layer, cfg.rmu_coeff,
                        cfg.rmu_alpha, rmu_u);
          break;
      }

      Tensor<S> total = lu.loss;
      StepRecord rec;
      rec.step = step_no++;
      rec.l_u = static_cast<double>(lu.loss.item());
      rec.target_nll = lu.target_nll;
      rec.retain_nll = lu.retain_nll;
      rec.l_g = std::numeric_limits<double>::quiet_NaN();
      rec.gate_mean_target = std::numeric_limits<double>::quiet_NaN();
      rec.gate_mean_retain = std::numeric_limits<double>::quiet_NaN();
      if (!gate_outputs.empty()) {
        double sum_t = 0, sum_r = 0;
        size_t n_t = 0, n_r = 0;
        for (size_t i = 0; i < gate_outputs.size(); ++i) {
          const double v = static_cast<double>(gate_outputs[i].item());
          if (gate_labels[i] == 1) {
            sum_t += v;
            ++n_t;
          } else {
            sum_r += v;
            ++n_r;
          }
        }
        if (n_t) rec.gate_mean_target = sum_t / double(n_t);
        if (n_r) rec.gate_mean_retain = sum_r / double(n_r);
        if (cfg.mode == UnlearnMode::kGrun) {
          Tensor<S> lg = gate_loss(gate_outputs, gate_labels);
          rec.l_g = static_cast<double>(lg.item());
          total = ops::add(total, lg);
        }
      }

      if (!std::isfinite(rec.l_u))
        throw std::runtime_error("train_unlearn: non-finite loss at step " +
                                 std::to_string(rec.step));

      // GD/GA early stop: halt before applying the crossing step's update.
      if ((cfg.method == UnlearnMethod::kGd ||
           cfg.method == UnlearnMethod::kGa) &&
          rec.target_nll > tau) {
        rec.stopped_early = true;
        log.stopped_early = true;
        log.steps.push_back(rec);
        break;
      }

      opt.zero_grad();
      total.backward();
      opt.step();
      log.steps.push_back(rec);
    }
  }

  if (grun_mode) model.set_trainable(true);
  return log;
}

}  // namespace grunlab
