#pragma once

// Linear layers and their LoRA-adapted variant. Weights are stored row-major
// as [d_in, d_out] so that y = x @ weight + bias acts on row vectors.

#include <random>
#include <string>
#include <vector>

#include "minivlm/tensor.hpp"

namespace minivlm {

struct Linear {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]

  i64 d_in() const { return weight.dim(0); }
  i64 d_out() const { return weight.dim(1); }
  i64 param_count() const { return weight.numel() + bias.numel(); }

  static Linear init(i64 d_in, i64 d_out, std::mt19937_64& rng,
                     bool trainable = true);
};

Tensor linear(const Linear& l, const Tensor& x);

// y = x @ W + b + (alpha/rank) * ((x @ A) @ B). A is [d_in, rank] and starts
// random, B is [rank, d_out] and starts at zero, so the adapter is an exact
// identity at initialization. The base weight and bias stay frozen; only A
// and B are trainable.
struct LoraLinear {
  Linear base;
  Tensor lora_a;  // [d_in, rank]
  Tensor lora_b;  // [rank, d_out]
  i64 rank = 0;
  double alpha = 0.0;

  static LoraLinear wrap(Linear base, i64 rank, double alpha,
                         std::mt19937_64& rng);
  // Folds the adapter into a plain linear: W + (alpha/rank) * A @ B.
  Linear merged() const;
};

Tensor lora_forward(const LoraLinear& l, const Tensor& x);

// [.., T, d] <-> [.., H, T, d/H] for multi-head attention.
Tensor split_heads(const Tensor& x, i64 n_heads);
Tensor merge_heads(const Tensor& x);

// Named parameter handle used for checkpoints, the optimizer and the
// frozen-set assertions.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

void append_linear_params(std::vector<NamedTensor>& out, const std::string& prefix,
                          const Linear& l, bool trainable);
void append_lora_params(std::vector<NamedTensor>& out, const std::string& prefix,
                        const LoraLinear& l);

}  // namespace minivlm
