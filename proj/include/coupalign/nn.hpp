#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "coupalign/catn.hpp"
#include "coupalign/ops.hpp"

namespace coupalign {

struct Init {
  enum class Kind { zeros, ones, normal, uniform } kind = Kind::zeros;
  double scale = 0.0;  // std for normal, bound for uniform

  static Init zeros() { return {Kind::zeros, 0.0}; }
  static Init ones() { return {Kind::ones, 0.0}; }
  static Init normal(double std) { return {Kind::normal, std}; }
  static Init uniform(double bound) { return {Kind::uniform, bound}; }
};

/// Named, insertion-ordered collection of trainable parameters and
/// non-trainable buffers (batch-norm running statistics).
template <class T>
class ParamStore {
 public:
  using Item = std::pair<std::string, Tensor<T>>;

  Tensor<T> add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng) {
    const std::size_t n = numel(shape);
    std::vector<T> v(n, T(0));
    switch (init.kind) {
      case Init::Kind::zeros: break;
      case Init::Kind::ones: std::fill(v.begin(), v.end(), T(1)); break;
      case Init::Kind::normal: {
        std::normal_distribution<double> d(0.0, 1.0);
        for (auto& x : v) x = static_cast<T>(d(rng) * init.scale);
        break;
      }
      case Init::Kind::uniform: {
        std::uniform_real_distribution<double> d(-init.scale, init.scale);
        for (auto& x : v) x = static_cast<T>(d(rng));
        break;
      }
    }
    Tensor<T> t(std::move(shape), std::move(v), true);
    insert(params_, name, t);
    return t;
  }

  Tensor<T> add_buffer(const std::string& name, Shape shape, T value) {
    Tensor<T> t = Tensor<T>::full(std::move(shape), value);
    insert(buffers_, name, t);
    return t;
  }

  const std::vector<Item>& parameters() const { return params_; }
  const std::vector<Item>& buffers() const { return buffers_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second.first ? params_[it->second.second].second : buffers_[it->second.second].second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  std::vector<catn::Entry> to_entries() const {
    std::vector<catn::Entry> out;
    for (const auto& [n, t] : params_) out.push_back(catn::to_entry(n, t));
    for (const auto& [n, t] : buffers_) out.push_back(catn::to_entry(n, t));
    return out;
  }

  /// Overwrites every parameter and buffer by name; shapes must agree.
  void load_entries(const std::vector<catn::Entry>& entries) {
    for (auto* group : {&params_, &buffers_}) {
      for (auto& [n, t] : *group) {
        const auto& e = catn::find(entries, n);
        if (e.shape != t.shape()) {
          throw FormatError("tensor '" + n + "' has shape " + shape_str(e.shape) + ", expected " +
                                shape_str(t.shape()),
                            0);
        }
        Tensor<T> src = catn::to_tensor<T>(e);
        std::copy(src.values().begin(), src.values().end(), t.mutable_data().begin());
      }
    }
  }

  /// Copies values from a store of possibly different precision.
  template <class U>
  void copy_from(const ParamStore<U>& other) {
    auto copy_group = [&](std::vector<Item>& mine, const auto& theirs) {
      if (mine.size() != theirs.size()) throw ContractError("copy_from: parameter sets differ");
      for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i].first != theirs[i].first || mine[i].second.shape() != theirs[i].second.shape()) {
          throw ContractError("copy_from: mismatch at '" + mine[i].first + "'");
        }
        auto dst = mine[i].second.mutable_data();
        const auto& src = theirs[i].second.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(src[k]);
      }
    };
    copy_group(params_, other.parameters());
    copy_group(buffers_, other.buffers());
  }

 private:
  void insert(std::vector<Item>& group, const std::string& name, const Tensor<T>& t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_[name] = {&group == &params_, group.size()};
    group.emplace_back(name, t);
  }

  std::vector<Item> params_;
  std::vector<Item> buffers_;
  std::map<std::string, std::pair<bool, std::size_t>> index_;
};

template <class T>
struct Linear {
  Tensor<T> weight;  // [in × out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool with_bias = true) {
    weight = ps.add(name + ".W", {in, out}, Init::uniform(1.0 / std::sqrt(static_cast<double>(in))), rng);
    if (with_bias) bias = ps.add(name + ".b", {out}, Init::zeros(), rng);
  }

  /// Applies to the last axis of x (any rank).
  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t in = weight.dim(0);
    if (x.shape().back() != in) {
      throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    }
    const bool flat = x.rank() == 2;
    Tensor<T> x2 = flat ? x : reshape(x, {x.numel() / in, in});
    Tensor<T> y = matmul(x2, weight);
    if (bias.defined()) y = add_bias(y, bias);
    if (flat) return y;
    Shape s = x.shape();
    s.back() = weight.dim(1);
    return reshape(y, s);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::mt19937_64& rng) {
    gamma = ps.add(name + ".g", {dim}, Init::ones(), rng);
    beta = ps.add(name + ".b", {dim}, Init::zeros(), rng);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  mutable BatchNormState<T> state;

  BatchNorm() = default;
  BatchNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::mt19937_64& rng) {
    gamma = ps.add(name + ".g", {dim}, Init::ones(), rng);
    beta = ps.add(name + ".b", {dim}, Init::zeros(), rng);
    state.running_mean = ps.add_buffer(name + ".running_mean", {dim}, T(0));
    state.running_var = ps.add_buffer(name + ".running_var", {dim}, T(1));
  }
  Tensor<T> operator()(const Tensor<T>& x, bool train) const { return batch_norm(x, gamma, beta, state, train); }
};

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
      : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, dim, rng) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

inline std::vector<std::uint8_t> all_valid(std::size_t n) { return std::vector<std::uint8_t>(n, 1); }

/// Scaled dot-product attention with `heads` heads. Queries come from
/// `query` [Nq×D], keys/values from `context` [Nk×Dk]; keys with
/// key_valid[j] == 0 get zero weight. The key projection has no bias.
template <class T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads,
                     std::mt19937_64& rng, std::size_t context_dim = 0)
      : q(ps, name + ".q", dim, dim, rng),
        k(ps, name + ".k", context_dim ? context_dim : dim, dim, rng, false),
        v(ps, name + ".v", context_dim ? context_dim : dim, dim, rng),
        o(ps, name + ".o", dim, dim, rng),
        heads(heads) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError(name + ": dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    }
  }

  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& context, const std::vector<std::uint8_t>& key_valid,
                       std::vector<Tensor<T>>* probs = nullptr) const {
    const Tensor<T> qp = q(query), kp = k(context), vp = v(context);
    const std::size_t dim = qp.dim(1), dh = dim / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> qh = heads == 1 ? qp : slice(qp, 1, h * dh, (h + 1) * dh);
      Tensor<T> kh = heads == 1 ? kp : slice(kp, 1, h * dh, (h + 1) * dh);
      Tensor<T> vh = heads == 1 ? vp : slice(vp, 1, h * dh, (h + 1) * dh);
      Tensor<T> a = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), key_valid);
      if (probs) probs->push_back(a);
      outs.push_back(matmul(a, vh));
    }
    return o(heads == 1 ? outs.front() : concat(outs, 1));
  }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(x)).
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& ps, const std::string& name, std::size_t dim, std::size_t heads,
                   std::mt19937_64& rng)
      : ln1(ps, name + ".ln1", dim, rng),
        ln2(ps, name + ".ln2", dim, rng),
        attn(ps, name + ".attn", dim, heads, rng),
        mlp(ps, name + ".mlp", dim, 2 * dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::uint8_t>& valid,
                       std::vector<Tensor<T>>* probs = nullptr) const {
    const Tensor<T> h = ln1(x);
    Tensor<T> y = add(x, attn(h, h, valid, probs));
    return add(y, mlp(ln2(y)));
  }
};

}  // namespace coupalign
