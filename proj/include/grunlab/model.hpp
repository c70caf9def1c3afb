#pragma once

#include <map>
#include <string>
#include <vector>

#include "grunlab/intervention.hpp"
#include "grunlab/ops.hpp"
#include "grunlab/tensor.hpp"

namespace grunlab {

struct ModelConfig {
  size_t vocab_size = 0;
  size_t d_model = 64;
  size_t n_layers = 8;
  size_t n_heads = 4;
  size_t max_seq_len = 128;
  size_t ff_mult = 4;
  // Token id acting as a prompt-summary bottleneck: positions after its
  // first occurrence attend only from it onward, so the answer span reads
  // the prompt exclusively through that position's hidden state. Negative
  // disables the bottleneck. Matches the tokenizer's <a> separator.
  int summary_token = 4;

  size_t head_dim() const { return d_model / n_heads; }
  size_t ff_dim() const { return d_model * ff_mult; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 ||
        max_seq_len < 1 || ff_mult < 1)
      throw ConfigError("model config: all extents must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " +
                        std::to_string(n_heads));
  }
};

// Where and how interventions fire during a forward pass. The position is
// the absolute index of the last prompt token; the hook fires once there.
template <class S>
struct HookSpec {
  const GrunStack<S>* stack = nullptr;
  size_t position = 0;
  GateOverride override_mode = GateOverride::kNone;

  bool active() const { return stack != nullptr && !stack->empty(); }
};

// Per-layer hidden states h_i^(l) (post-block, post-replacement) plus the
// pre/post views of the hook position at gated layers.
template <class S>
struct ForwardResult {
  Tensor<S> logits;                       // [T, vocab]
  std::vector<Tensor<S>> layer_states;    // n_layers entries of [T, d]
  std::map<size_t, Tensor<S>> hook_pre;   // layer -> [1, d]
  std::map<size_t, Tensor<S>> hook_post;  // layer -> [1, d]
  std::vector<GateReading<S>> gates;

  // h at `layer` (1-based) for token `pos`, as a [1,d] graph slice.
  Tensor<S> state_row(size_t layer, size_t pos) const {
    return ops::slice(layer_states.at(layer - 1), 0, pos, pos + 1);
  }
};

// Toy pre-norm decoder-only transformer. Learned absolute positions, GELU
// feed-forward, untied LM head, no attention biases.
template <class S>
class Model {
 public:
  struct Layer {
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> wq, wk, wv, wo;  // [d, d]
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> w1, b1;  // [d, ff], [ff]
    Tensor<S> w2, b2;  // [ff, d], [d]
  };

  Model() = default;

  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const size_t d = cfg_.d_model, ff = cfg_.ff_dim(), v = cfg_.vocab_size;
    const S sd = S(0.02);
    tok_emb_ = Tensor<S>::randn({v, d}, rng, sd, true);
    pos_emb_ = Tensor<S>::randn({cfg_.max_seq_len, d}, rng, sd, true);
    layers_.resize(cfg_.n_layers);
    for (auto& l : layers_) {
      l.ln1_g = Tensor<S>::filled({d}, S(1), true);
      l.ln1_b = Tensor<S>::zeros({d}, true);
      l.wq = Tensor<S>::randn({d, d}, rng, sd, true);
      l.wk = Tensor<S>::randn({d, d}, rng, sd, true);
      l.wv = Tensor<S>::randn({d, d}, rng, sd, true);
      l.wo = Tensor<S>::randn({d, d}, rng, sd, true);
      l.ln2_g = Tensor<S>::filled({d}, S(1), true);
      l.ln2_b = Tensor<S>::zeros({d}, true);
      l.w1 = Tensor<S>::randn({d, ff}, rng, sd, true);
      l.b1 = Tensor<S>::zeros({ff}, true);
      l.w2 = Tensor<S>::randn({ff, d}, rng, sd, true);
      l.b2 = Tensor<S>::zeros({d}, true);
    }
    lnf_g_ = Tensor<S>::filled({d}, S(1), true);
    lnf_b_ = Tensor<S>::zeros({d}, true);
    lm_head_ = Tensor<S>::randn({d, v}, rng, sd, true);
  }

  static constexpr size_t kNoSummary = static_cast<size_t>(-1);

  // First occurrence of the summary token, or kNoSummary.
  size_t summary_position(const std::vector<int>& tokens) const {
    if (cfg_.summary_token < 0) return kNoSummary;
    for (size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] == cfg_.summary_token) return i;
    return kNoSummary;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Layer>& layers() const { return layers_; }
  Tensor<S> tok_emb() const { return tok_emb_; }
  Tensor<S> pos_emb() const { return pos_emb_; }
  Tensor<S> lnf_g() const { return lnf_g_; }
  Tensor<S> lnf_b() const { return lnf_b_; }
  Tensor<S> lm_head() const { return lm_head_; }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("model/tok_emb", tok_emb_);
    out.emplace_back("model/pos_emb", pos_emb_);
    for (size_t i = 0; i < layers_.size(); ++i) {
      const std::string base = "model/layer" + std::to_string(i + 1) + "/";
      const Layer& l = layers_[i];
      out.emplace_back(base + "ln1.g", l.ln1_g);
      out.emplace_back(base + "ln1.b", l.ln1_b);
      out.emplace_back(base + "wq", l.wq);
      out.emplace_back(base + "wk", l.wk);
      out.emplace_back(base + "wv", l.wv);
      out.emplace_back(base + "wo", l.wo);
      out.emplace_back(base + "ln2.g", l.ln2_g);
      out.emplace_back(base + "ln2.b", l.ln2_b);
      out.emplace_back(base + "w1", l.w1);
      out.emplace_back(base + "b1", l.b1);
      out.emplace_back(base + "w2", l.w2);
      out.emplace_back(base + "b2", l.b2);
    }
    out.emplace_back("model/lnf.g", lnf_g_);
    out.emplace_back("model/lnf.b", lnf_b_);
    out.emplace_back("model/lm_head", lm_head_);
    return out;
  }

  std::vector<Tensor<S>> parameters() const {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  void set_trainable(bool trainable) const {
    for (const auto& p : parameters()) p.set_requires_grad(trainable);
  }

  uint64_t parameter_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : named_parameters()) {
      h ^= fnv1a64(name);
      h ^= fnv1a64(t.value().data(), t.value().size() * sizeof(S));
      h *= 0x100000001b3ull;
    }
    return h;
  }

  // Full-sequence causal forward. Hooks replace the hidden state at their
  // layer and position before the next layer (and any later token) sees it.
  ForwardResult<S> forward(const std::vector<int>& tokens,
                           const HookSpec<S>* hooks = nullptr) const {
    if (tokens.empty())
      throw std::invalid_argument("forward: empty token sequence");
    if (tokens.size() > cfg_.max_seq_len)
      throw std::length_error("forward: sequence length " +
                              std::to_string(tokens.size()) +
                              " exceeds max_seq_len " +
                              std::to_string(cfg_.max_seq_len));
    const size_t t = tokens.size();
    const bool hooked = hooks != nullptr && hooks->active();
    if (hooked) {
      if (hooks->position >= t)
        throw std::invalid_argument("forward: hook position " +
                                    std::to_string(hooks->position) +
                                    " outside sequence of length " +
                                    std::to_string(t));
      for (size_t l : hooks->stack->layer_set())
        if (l < 1 || l > cfg_.n_layers)
          throw std::invalid_argument("forward: hooked layer " +
                                      std::to_string(l) +
                                      " outside model depth " +
                                      std::to_string(cfg_.n_layers));
    }

    ForwardResult<S> res;
    Tensor<S> x = ops::add(ops::embedding(tok_emb_, tokens),
                           ops::slice(pos_emb_, 0, 0, t));
    const size_t n_heads = cfg_.n_heads, hd = cfg_.head_dim();
    const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));
    const size_t summary_pos = summary_position(tokens);
    for (size_t li = 0; li < layers_.size(); ++li) {
      const Layer& l = layers_[li];
      Tensor<S> a = ops::layer_norm(x, l.ln1_g, l.ln1_b);
      Tensor<S> q = ops::matmul(a, l.wq);
      Tensor<S> k = ops::matmul(a, l.wk);
      Tensor<S> v = ops::matmul(a, l.wv);
      std::vector<Tensor<S>> heads;
      heads.reserve(n_heads);
      for (size_t h = 0; h < n_heads; ++h) {
        Tensor<S> qh = ops::slice(q, 1, h * hd, (h + 1) * hd);
        Tensor<S> kh = ops::slice(k, 1, h * hd, (h + 1) * hd);
        Tensor<S> vh = ops::slice(v, 1, h * hd, (h + 1) * hd);
        Tensor<S> scores =
            ops::scale(ops::matmul(qh, ops::transpose(kh)), att_scale);
        Tensor<S> masked = ops::causal_mask(scores);
        if (summary_pos != kNoSummary)
          masked = ops::summary_mask(masked, summary_pos);
        Tensor<S> probs = ops::softmax(masked);
        heads.push_back(ops::matmul(probs, vh));
      }
      x = ops::add(x, ops::matmul(ops::concat(heads, 1), l.wo));
      Tensor<S> b = ops::layer_norm(x, l.ln2_g, l.ln2_b);
      Tensor<S> f = ops::add_rowvec(
          ops::matmul(ops::gelu(ops::add_rowvec(ops::matmul(b, l.w1), l.b1)),
                      l.w2),
          l.b2);
      x = ops::add(x, f);

      const size_t layer_no = li + 1;
      if (hooked && hooks->stack->has_layer(layer_no)) {
        Tensor<S> pre = ops::slice(x, 0, hooks->position, hooks->position + 1);
        Tensor<S> post = hooks->stack->apply(layer_no, pre,
                                             hooks->override_mode, &res.gates);
        res.hook_pre[layer_no] = pre;
        res.hook_post[layer_no] = post;
        x = ops::replace_row(x, hooks->position, post);
      }
      res.layer_states.push_back(x);
    }
    res.logits = ops::matmul(ops::layer_norm(x, lnf_g_, lnf_b_), lm_head_);
    return res;
  }

 private:
  ModelConfig cfg_;
  Tensor<S> tok_emb_, pos_emb_;
  std::vector<Layer> layers_;
  Tensor<S> lnf_g_, lnf_b_, lm_head_;
};

template <class S>
Model<S> build_model(const ModelConfig& cfg, uint64_t seed) {
  return Model<S>(cfg, seed);
}

// Mean token-level NLL over the answer span only; prompt rows are masked.
template <class S>
Tensor<S> sequence_nll_graph(const Model<S>& model,
                             const std::vector<int>& prompt,
                             const std::vector<int>& answer,
                             const HookSpec<S>* hooks = nullptr,
                             ops::Reduction reduction = ops::Reduction::kMean,
                             ForwardResult<S>* fwd_out = nullptr) {
  if (prompt.empty())
    throw std::invalid_argument("sequence_nll: empty prompt");
  if (answer.empty())
    throw std::invalid_argument("sequence_nll: empty answer");
  std::vector<int> tokens = prompt;
  tokens.insert(tokens.end(), answer.begin(), answer.end());
  ForwardResult<S> fwd = model.forward(tokens, hooks);
  std::vector<int> targets(tokens.size(), -1);
  for (size_t j = prompt.size() - 1; j + 1 < tokens.size(); ++j)
    targets[j] = tokens[j + 1];
  Tensor<S> nll = ops::cross_entropy_logits(fwd.logits, targets, reduction);
  if (fwd_out) *fwd_out = std::move(fwd);
  return nll;
}

template <class S>
S sequence_nll(const Model<S>& model, const std::vector<int>& prompt,
               const std::vector<int>& answer,
               const HookSpec<S>* hooks = nullptr) {
  NoGradGuard ng;
  return sequence_nll_graph(model, prompt, answer, hooks).item();
}

// KV-cached single-token decoding. Hooks fire while the prompt is fed, at
// the configured position; the replaced state lands in the caches of later
// layers, so generated tokens keep attending to it.
template <class S>
class DecodeSession {
 public:
  DecodeSession(const Model<S>& model, const HookSpec<S>* hooks)
      : model_(model), hooks_(hooks) {
    const auto& cfg = model.config();
    k_cache_.assign(cfg.n_layers, {});
    v_cache_.assign(cfg.n_layers, {});
    for (auto& c : k_cache_) c.reserve(cfg.max_seq_len * cfg.d_model);
    for (auto& c : v_cache_) c.reserve(cfg.max_seq_len * cfg.d_model);
  }

  size_t length() const { return len_; }

  // Feeds one token at the next position, returns the logits row.
  const std::vector<S>& step(int token) {
    const auto& cfg = model_.config();
    if (len_ >= cfg.max_seq_len)
      throw std::length_error("decode: sequence length exceeds max_seq_len " +
                              std::to_string(cfg.max_seq_len));
    const size_t d = cfg.d_model, hd = cfg.head_dim(), nh = cfg.n_heads;
    const size_t t = len_;
    const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));
    const bool hook_here =
        hooks_ != nullptr && hooks_->active() && t == hooks_->position;
    if (summary_pos_ == Model<S>::kNoSummary && cfg.summary_token >= 0 &&
        token == cfg.summary_token)
      summary_pos_ = t;
    // Rows past the summary position attend from it onward only.
    const size_t att_begin =
        (summary_pos_ != Model<S>::kNoSummary && t > summary_pos_)
            ? summary_pos_
            : 0;

    std::vector<S> x(d);
    {
      const auto& te = model_.tok_emb().value();
      const auto& pe = model_.pos_emb().value();
      if (token < 0 || static_cast<size_t>(token) >= cfg.vocab_size)
        throw std::invalid_argument("decode: token id " +
                                    std::to_string(token) + " out of range");
      for (size_t j = 0; j < d; ++j)
        x[j] = te[static_cast<size_t>(token) * d + j] + pe[t * d + j];
    }

    std::vector<S> a(d), q(d), k(d), v(d), attn(d), o(d), f1(cfg.ff_dim()),
        f2(d);
    std::vector<S> weights(t + 1);
    for (size_t li = 0; li < cfg.n_layers; ++li) {
      const auto& l = model_.layers()[li];
      kernels::serial::layernorm_rows(x.data(), l.ln1_g.value().data(),
                                      l.ln1_b.value().data(), a.data(), 1, d,
                                      S(1e-5));
      kernels::matmul(a.data(), l.wq.value().data(), q.data(), 1, d, d);
      kernels::matmul(a.data(), l.wk.value().data(), k.data(), 1, d, d);
      kernels::matmul(a.data(), l.wv.value().data(), v.data(), 1, d, d);
      auto& kc = k_cache_[li];
      auto& vc = v_cache_[li];
      kc.insert(kc.end(), k.begin(), k.end());
      vc.insert(vc.end(), v.begin(), v.end());

      for (size_t h = 0; h < nh; ++h) {
        const size_t off = h * hd;
        const size_t span = t + 1 - att_begin;
        for (size_t j = att_begin; j <= t; ++j) {
          S dot = S(0);
          const S* kr = kc.data() + j * d + off;
          for (size_t p = 0; p < hd; ++p) dot += q[off + p] * kr[p];
          weights[j - att_begin] = dot * att_scale;
        }
        kernels::serial::softmax_rows(weights.data(), weights.data(), 1,
                                      span);
        for (size_t p = 0; p < hd; ++p) {
          S acc = S(0);
          for (size_t j = att_begin; j <= t; ++j) {
            if (weights[j - att_begin] == S(0)) continue;
            acc += weights[j - att_begin] * vc[j * d + off + p];
          }
          attn[off + p] = acc;
        }
      }
      kernels::matmul(attn.data(), l.wo.value().data(), o.data(), 1, d, d);
      for (size_t j = 0; j < d; ++j) x[j] += o[j];

      kernels::serial::layernorm_rows(x.data(), l.ln2_g.value().data(),
                                      l.ln2_b.value().data(), a.data(), 1, d,
                                      S(1e-5));
      kernels::matmul(a.data(), l.w1.value().data(), f1.data(), 1, d,
                      cfg.ff_dim());
      for (size_t j = 0; j < cfg.ff_dim(); ++j) {
        const S z = f1[j] + l.b1.value()[j];
        f1[j] = S(0.5) * z * (S(1) + std::erf(z * S(0.7071067811865476)));
      }
      kernels::matmul(f1.data(), l.w2.value().data(), f2.data(), 1,
                      cfg.ff_dim(), d);
      for (size_t j = 0; j < d; ++j) x[j] += f2[j] + l.b2.value()[j];

      if (hook_here && hooks_->stack->has_layer(li + 1)) {
        x = hooks_->stack->apply_value(li + 1, x, hooks_->override_mode);
        // The replaced state is what later layers' caches see for this
        // position; layer li+1 consumes it on the next loop iteration.
      }
    }

    kernels::serial::layernorm_rows(x.data(), model_.lnf_g().value().data(),
                                    model_.lnf_b().value().data(), a.data(), 1,
                                    d, S(1e-5));
    logits_.assign(cfg.vocab_size, S(0));
    kernels::matmul(a.data(), model_.lm_head().value().data(), logits_.data(),
                    1, d, cfg.vocab_size);
    ++len_;
    return logits_;
  }

 private:
  const Model<S>& model_;
  const HookSpec<S>* hooks_;
  std::vector<std::vector<S>> k_cache_, v_cache_;
  std::vector<S> logits_;
  size_t len_ = 0;
  size_t summary_pos_ = Model<S>::kNoSummary;
};

// Deterministic argmax decoding; ties break toward the lowest id. Stops at
// end-of-text (id 2) or after max_new tokens.
template <class S>
std::vector<int> generate_greedy(const Model<S>& model,
                                 const std::vector<int>& prompt,
                                 size_t max_new,
                                 const HookSpec<S>* hooks = nullptr,
                                 int eot_id = 2) {
  if (prompt.empty())
    throw std::invalid_argument("generate: empty prompt");
  std::vector<int> out;
  if (max_new == 0) return out;
  DecodeSession<S> session(model, hooks);
  const std::vector<S>* logits = nullptr;
  for (int tok : prompt) logits = &session.step(tok);
  while (out.size() < max_new) {
    int best = 0;
    for (size_t j = 1; j < logits->size(); ++j)
      if ((*logits)[j] > (*logits)[best]) best = static_cast<int>(j);
    if (best == eot_id) break;
    out.push_back(best);
    if (out.size() == max_new ||
        session.length() >= model.config().max_seq_len)
      break;
    logits = &session.step(best);
  }
  return out;
}

}  // namespace grunlab
