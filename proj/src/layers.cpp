#include "minivlm/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace minivlm {

Linear Linear::init(i64 d_in, i64 d_out, std::mt19937_64& rng, bool trainable) {
  Linear l;
  const double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  l.weight = rand_uniform({d_in, d_out}, rng, -bound, bound, trainable);
  l.bias = zeros({d_out}, trainable);
  return l;
}

Tensor linear(const Linear& l, const Tensor& x) {
  return add(matmul(x, l.weight), l.bias);
}

LoraLinear LoraLinear::wrap(Linear base, i64 rank, double alpha,
                            std::mt19937_64& rng) {
  const i64 d_in = base.d_in();
  const i64 d_out = base.d_out();
  if (rank < 1 || rank > std::min(d_in, d_out))
    throw std::invalid_argument(
        "lora: rank " + std::to_string(rank) + " exceeds min(" +
        std::to_string(d_in) + "," + std::to_string(d_out) + ")");
  LoraLinear l;
  l.base = std::move(base);
  l.rank = rank;
  l.alpha = alpha;
  l.lora_a = randn({d_in, rank}, rng, 0.0,
                   1.0 / std::sqrt(static_cast<double>(d_in)), true);
  l.lora_b = zeros({rank, d_out}, true);
  return l;
}

Linear LoraLinear::merged() const {
  Linear m;
  m.weight = base.weight.clone();
  m.bias = base.bias.clone();
  NoGradGuard ng;
  Tensor delta = scale(matmul(lora_a, lora_b), alpha / static_cast<double>(rank));
  auto w = m.weight.data();
  auto d = delta.data();
  for (size_t i = 0; i < w.size(); ++i) w[i] += d[i];
  return m;
}

Tensor lora_forward(const LoraLinear& l, const Tensor& x) {
  Tensor y = linear(l.base, x);
  Tensor delta = matmul(matmul(x, l.lora_a), l.lora_b);
  return add(y, scale(delta, l.alpha / static_cast<double>(l.rank)));
}

Tensor split_heads(const Tensor& x, i64 n_heads) {
  Shape s = x.shape();
  const i64 d = s.back();
  const i64 t = s[s.size() - 2];
  if (d % n_heads != 0)
    throw std::invalid_argument("split_heads: width " + std::to_string(d) +
                                " not divisible by " + std::to_string(n_heads));
  Shape split(s.begin(), s.end() - 2);
  split.push_back(t);
  split.push_back(n_heads);
  split.push_back(d / n_heads);
  Tensor r = reshape(x, split);
  return transpose(r, static_cast<int>(split.size()) - 3,
                   static_cast<int>(split.size()) - 2);
}

Tensor merge_heads(const Tensor& x) {
  Tensor t = transpose(x, x.ndim() - 3, x.ndim() - 2);  // [.., T, H, dh]
  Shape s = t.shape();
  Shape merged(s.begin(), s.end() - 3);
  merged.push_back(s[s.size() - 3]);
  merged.push_back(s[s.size() - 2] * s.back());
  return reshape(t, merged);
}

void append_linear_params(std::vector<NamedTensor>& out, const std::string& prefix,
                          const Linear& l, bool trainable) {
  out.push_back({prefix + ".weight", l.weight, trainable});
  out.push_back({prefix + ".bias", l.bias, trainable});
}

void append_lora_params(std::vector<NamedTensor>& out, const std::string& prefix,
                        const LoraLinear& l) {
  append_linear_params(out, prefix, l.base, false);
  out.push_back({prefix + ".lora_a", l.lora_a, true});
  out.push_back({prefix + ".lora_b", l.lora_b, true});
}

}  // namespace minivlm
