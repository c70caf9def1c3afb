#pragma once

#include <string>
#include <vector>

#include "grunlab/intervention.hpp"
#include "grunlab/model.hpp"

namespace grunlab {

// On-disk tensor record. The file layout is:
//   magic "GRUNCKPT" (8 bytes), u32 version = 1, u32 tensor count;
//   per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//   rank x u32 dims, row-major little-endian f32 payload.
// All integers little-endian. Read errors name the failing byte offset.
struct NamedTensorData {
  std::string name;
  std::vector<size_t> dims;
  std::vector<float> data;
};

void write_checkpoint_file(const std::string& path,
                           const std::vector<NamedTensorData>& tensors);
std::vector<NamedTensorData> read_checkpoint_file(const std::string& path);

namespace detail {

template <class S>
NamedTensorData to_record(const std::string& name, const Tensor<S>& t) {
  NamedTensorData rec;
  rec.name = name;
  rec.dims = t.shape();
  rec.data.reserve(t.numel());
  for (S v : t.value()) rec.data.push_back(static_cast<float>(v));
  return rec;
}

}  // namespace detail

// Model + interventions in one file: meta/config first, then model tensors
// in canonical order, then grun tensors and meta/stack when present.
template <class S>
void save_checkpoint(const Model<S>& model, const GrunStack<S>& stack,
                     const std::string& path) {
  std::vector<NamedTensorData> tensors;
  const ModelConfig& cfg = model.config();
  tensors.push_back(
      {"meta/config",
       {7},
       {static_cast<float>(cfg.vocab_size), static_cast<float>(cfg.d_model),
        static_cast<float>(cfg.n_layers), static_cast<float>(cfg.n_heads),
        static_cast<float>(cfg.max_seq_len), static_cast<float>(cfg.ff_mult),
        static_cast<float>(cfg.summary_token)}});
  for (const auto& [name, t] : model.named_parameters())
    tensors.push_back(detail::to_record(name, t));
  if (!stack.empty()) {
    for (const auto& [name, t] : stack.named_parameters())
      tensors.push_back(detail::to_record(name, t));
    tensors.push_back({"meta/stack",
                       {2},
                       {static_cast<float>(stack.coeff),
                        static_cast<float>(stack.size())}});
  }
  write_checkpoint_file(path, tensors);
}

template <class S>
void save_checkpoint(const Model<S>& model, const std::string& path) {
  save_checkpoint(model, GrunStack<S>{}, path);
}

struct LoadedCheckpoint {
  Model<float> model;
  GrunStack<float> stack;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace grunlab
