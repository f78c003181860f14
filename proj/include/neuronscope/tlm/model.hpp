#pragma once

// A small GPT-2 style decoder: learned token and position embeddings,
// pre-norm residual blocks (fused QKV projection A, attention output
// projection Aproj, MLP expansion B with GELU, MLP projection Bproj), final
// layer norm and an untied output head.
//
// The outputs of A, Aproj, B and Bproj (after the bias, before any
// nonlinearity or residual add) are the probed units. The same points accept
// forcing: a planned unit is overwritten with a fixed value before anything
// downstream reads it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/unit_catalog.hpp"

namespace nscope::tlm {

struct TlmConfig {
  std::uint32_t vocab_size = 256;
  std::uint32_t model_dim = 64;
  std::uint32_t num_blocks = 4;
  std::uint32_t num_heads = 4;
  std::uint32_t context_length = 32;
  std::uint64_t seed = 0;

  void validate() const {
    require(vocab_size >= 2, ErrorCode::InvalidArgument, "vocab_size must be >= 2");
    require(model_dim > 0 && num_blocks > 0 && num_heads > 0, ErrorCode::InvalidArgument,
            "model_dim, num_blocks and num_heads must be positive");
    require(model_dim % num_heads == 0, ErrorCode::InvalidArgument,
            "model_dim must be divisible by num_heads");
    require(context_length >= 2, ErrorCode::InvalidArgument, "context_length must be >= 2");
  }

  UnitCatalog catalog() const { return UnitCatalog(model_dim, num_blocks); }

  friend bool operator==(const TlmConfig&, const TlmConfig&) = default;
};

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims) : shape(std::move(dims)) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    data.assign(n, T(0));
  }
  std::size_t size() const noexcept { return data.size(); }
  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> a_w, a_b;          // D x 3D
  Tensor<T> aproj_w, aproj_b;  // D x D
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> b_w, b_b;          // D x 4D
  Tensor<T> bproj_w, bproj_b;  // 4D x D

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

template <typename T>
struct TlmWeights {
  Tensor<T> wte;  // V x D
  Tensor<T> wpe;  // L x D
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> lnf_g, lnf_b;
  Tensor<T> head_w;  // D x V

  explicit TlmWeights(const TlmConfig& c = {}) {
    const std::size_t d = c.model_dim;
    wte = Tensor<T>({c.vocab_size, d});
    wpe = Tensor<T>({c.context_length, d});
    blocks.resize(c.num_blocks);
    for (auto& b : blocks) {
      b.ln1_g = Tensor<T>({d});
      b.ln1_b = Tensor<T>({d});
      b.a_w = Tensor<T>({d, 3 * d});
      b.a_b = Tensor<T>({3 * d});
      b.aproj_w = Tensor<T>({d, d});
      b.aproj_b = Tensor<T>({d});
      b.ln2_g = Tensor<T>({d});
      b.ln2_b = Tensor<T>({d});
      b.b_w = Tensor<T>({d, 4 * d});
      b.b_b = Tensor<T>({4 * d});
      b.bproj_w = Tensor<T>({4 * d, d});
      b.bproj_b = Tensor<T>({d});
    }
    lnf_g = Tensor<T>({d});
    lnf_b = Tensor<T>({d});
    head_w = Tensor<T>({d, c.vocab_size});
  }

  // Visits every parameter with its checkpoint name, in canonical order.
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn&& fn) {
    fn(std::string("wte"), self.wte);
    fn(std::string("wpe"), self.wpe);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const auto p = "h." + std::to_string(i) + ".";
      fn(p + "ln1.g", b.ln1_g);
      fn(p + "ln1.b", b.ln1_b);
      fn(p + "A.w", b.a_w);
      fn(p + "A.b", b.a_b);
      fn(p + "Aproj.w", b.aproj_w);
      fn(p + "Aproj.b", b.aproj_b);
      fn(p + "ln2.g", b.ln2_g);
      fn(p + "ln2.b", b.ln2_b);
      fn(p + "B.w", b.b_w);
      fn(p + "B.b", b.b_b);
      fn(p + "Bproj.w", b.bproj_w);
      fn(p + "Bproj.b", b.bproj_b);
    }
    fn(std::string("ln_f.g"), self.lnf_g);
    fn(std::string("ln_f.b"), self.lnf_b);
    fn(std::string("head.w"), self.head_w);
  }
  template <typename Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, std::forward<Fn>(fn));
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, std::forward<Fn>(fn));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  void zero() {
    visit([](const std::string&, Tensor<T>& t) { std::fill(t.data.begin(), t.data.end(), T(0)); });
  }

  friend bool operator==(const TlmWeights&, const TlmWeights&) = default;
};

// ---------------------------------------------------------------------------
// Forcing.

struct ForcingEntry {
  UnitId unit;
  double value = 0.0;
};

struct ForcingPlan {
  std::vector<ForcingEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
};

// Plan resolved against a catalog: per block and kind, (channel, value).
template <typename T>
struct ResolvedPlan {
  std::vector<std::array<std::vector<std::pair<std::uint32_t, T>>, 4>> per_block;

  bool empty() const {
    for (const auto& b : per_block)
      for (const auto& k : b)
        if (!k.empty()) return false;
    return true;
  }
};

template <typename T>
ResolvedPlan<T> resolve_plan(const ForcingPlan& plan, const UnitCatalog& catalog) {
  ResolvedPlan<T> r;
  r.per_block.resize(catalog.num_blocks());
  std::vector<std::uint64_t> seen;
  for (const auto& e : plan.entries) {
    require(catalog.contains(e.unit), ErrorCode::UnknownUnit,
            "forcing plan names unit " + to_string(e.unit) + " outside the model");
    require(std::isfinite(e.value), ErrorCode::InvalidArgument, "forcing values must be finite");
    seen.push_back(catalog.flatten(e.unit));
    r.per_block[e.unit.block][static_cast<std::size_t>(e.unit.kind)].emplace_back(e.unit.channel,
                                                                                  T(e.value));
  }
  std::sort(seen.begin(), seen.end());
  require(std::adjacent_find(seen.begin(), seen.end()) == seen.end(), ErrorCode::InvalidArgument,
          "forcing plan lists a unit twice");
  return r;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels.

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// out[L x N] = in[L x K] * w[K x N] + b[N]
template <typename T>
void linear(const T* in, const T* w, const T* b, T* out, std::size_t rows, std::size_t k_dim,
            std::size_t n_dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* o = out + i * n_dim;
    if (b != nullptr)
      std::copy(b, b + n_dim, o);
    else
      std::fill(o, o + n_dim, T(0));
    const T* x = in + i * k_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const T a = x[k];
      const T* wr = w + k * n_dim;
      for (std::size_t j = 0; j < n_dim; ++j) o[j] += a * wr[j];
    }
  }
}

// dw += in^T dout, db += colsum(dout), din = dout w^T (din may be null).
template <typename T>
void linear_backward(const T* in, const T* w, const T* dout, T* dw, T* db, T* din, std::size_t rows,
                     std::size_t k_dim, std::size_t n_dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* g = dout + i * n_dim;
    const T* x = in + i * k_dim;
    if (db != nullptr)
      for (std::size_t j = 0; j < n_dim; ++j) db[j] += g[j];
    for (std::size_t k = 0; k < k_dim; ++k) {
      T* dwr = dw + k * n_dim;
      const T a = x[k];
      for (std::size_t j = 0; j < n_dim; ++j) dwr[j] += a * g[j];
    }
    if (din != nullptr) {
      T* dx = din + i * k_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const T* wr = w + k * n_dim;
        T s = 0;
        for (std::size_t j = 0; j < n_dim; ++j) s += g[j] * wr[j];
        dx[k] = s;
      }
    }
  }
}

template <typename T>
void layer_norm(const T* in, const T* g, const T* b, T* out, T* xhat, T* rstd, std::size_t rows,
                std::size_t dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* x = in + i * dim;
    T mean = 0;
    for (std::size_t j = 0; j < dim; ++j) mean += x[j];
    mean /= T(dim);
    T var = 0;
    for (std::size_t j = 0; j < dim; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= T(dim);
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[i] = r;
    for (std::size_t j = 0; j < dim; ++j) {
      const T h = (x[j] - mean) * r;
      xhat[i * dim + j] = h;
      out[i * dim + j] = h * g[j] + b[j];
    }
  }
}

// din += layer-norm backward of dout.
template <typename T>
void layer_norm_backward(const T* dout, const T* xhat, const T* rstd, const T* g, T* dg, T* db,
                         T* din, std::size_t rows, std::size_t dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* go = dout + i * dim;
    const T* h = xhat + i * dim;
    T mean_dh = 0, mean_dh_h = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const T dh = go[j] * g[j];
      mean_dh += dh;
      mean_dh_h += dh * h[j];
      dg[j] += go[j] * h[j];
      db[j] += go[j];
    }
    mean_dh /= T(dim);
    mean_dh_h /= T(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const T dh = go[j] * g[j];
      din[i * dim + j] += rstd[i] * (dh - mean_dh - h[j] * mean_dh_h);
    }
  }
}

// tanh approximation, as in GPT-2.
template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
void apply_forcing(T* values, std::size_t rows, std::size_t width, std::size_t from,
                   const std::vector<std::pair<std::uint32_t, T>>& entries) {
  for (std::size_t p = from; p < rows; ++p)
    for (const auto& [channel, value] : entries) values[p * width + channel] = value;
}

}  // namespace detail

template <typename T>
struct BlockCache {
  std::vector<T> x_in, ln1_xhat, ln1_rstd, h1, a, att, y, aproj, x_mid, ln2_xhat, ln2_rstd, h2, b, g,
      bproj;
};

template <typename T>
struct ForwardCache {
  std::size_t length = 0;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> x_final, lnf_xhat, lnf_rstd, hf, logits;
};

template <typename T>
struct ForwardOptions {
  const ResolvedPlan<T>* plan = nullptr;
  // Forcing applies to positions >= force_from.
  std::size_t force_from = 0;
};

template <typename T>
class Tlm {
 public:
  using Scalar = T;

  explicit Tlm(const TlmConfig& config) : config_(config), weights_(config) { config_.validate(); }
  Tlm(const TlmConfig& config, TlmWeights<T> weights)
      : config_(config), weights_(std::move(weights)) {
    config_.validate();
  }

  // GPT-2 style initialisation: N(0, 0.02), residual projections scaled by
  // 1/sqrt(2 * blocks), unit layer-norm gains.
  static Tlm initialized(const TlmConfig& config) {
    Tlm model(config);
    nscope::detail::Rng rng(config.seed);
    auto normal = [&]() {
      double u1 = nscope::detail::uniform_unit(rng);
      const double u2 = nscope::detail::uniform_unit(rng);
      if (u1 < 1e-300) u1 = 1e-300;
      return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    };
    const double resid = 0.02 / std::sqrt(2.0 * config.num_blocks);
    model.weights_.visit([&](const std::string& name, Tensor<T>& t) {
      const bool gain = name.ends_with(".g");
      const bool bias = name.ends_with(".b") && name != "wte";
      const bool residual = name.ends_with("Aproj.w") || name.ends_with("Bproj.w");
      for (auto& v : t.data) {
        if (gain)
          v = T(1);
        else if (bias)
          v = T(0);
        else
          v = T((residual ? resid : 0.02) * normal());
      }
    });
    return model;
  }

  const TlmConfig& config() const noexcept { return config_; }
  const TlmWeights<T>& weights() const noexcept { return weights_; }
  TlmWeights<T>& weights() noexcept { return weights_; }
  UnitCatalog catalog() const { return config_.catalog(); }

  void check_tokens(std::span<const std::int32_t> tokens) const {
    require(!tokens.empty(), ErrorCode::InvalidArgument, "empty token sequence");
    require(tokens.size() <= config_.context_length, ErrorCode::OutOfRange,
            "sequence of " + std::to_string(tokens.size()) + " tokens exceeds context length " +
                std::to_string(config_.context_length));
    for (auto t : tokens)
      require(t >= 0 && static_cast<std::uint32_t>(t) < config_.vocab_size, ErrorCode::OutOfRange,
              "token id " + std::to_string(t) + " outside vocabulary");
  }

  // Full forward pass, keeping every intermediate needed for backward().
  void forward(std::span<const std::int32_t> tokens, ForwardCache<T>& cache,
               const ForwardOptions<T>& opts = {}) const {
    check_tokens(tokens);
    const std::size_t len = tokens.size();
    const std::size_t d = config_.model_dim;
    const std::size_t heads = config_.num_heads;
    const std::size_t hd = d / heads;
    const T scale = T(1) / std::sqrt(T(hd));
    cache.length = len;
    cache.blocks.resize(config_.num_blocks);
    if (opts.plan != nullptr)
      require(opts.plan->per_block.size() == config_.num_blocks, ErrorCode::MismatchedCatalog,
              "forcing plan resolved for a different model");

    std::vector<T> x(len * d);
    for (std::size_t p = 0; p < len; ++p) {
      const T* te = weights_.wte.ptr() + static_cast<std::size_t>(tokens[p]) * d;
      const T* pe = weights_.wpe.ptr() + p * d;
      for (std::size_t j = 0; j < d; ++j) x[p * d + j] = te[j] + pe[j];
    }

    for (std::size_t bi = 0; bi < config_.num_blocks; ++bi) {
      const auto& w = weights_.blocks[bi];
      auto& c = cache.blocks[bi];
      const auto* forced = opts.plan != nullptr ? &opts.plan->per_block[bi] : nullptr;
      c.x_in = x;
      c.ln1_xhat.resize(len * d);
      c.ln1_rstd.resize(len);
      c.h1.resize(len * d);
      detail::layer_norm(x.data(), w.ln1_g.ptr(), w.ln1_b.ptr(), c.h1.data(), c.ln1_xhat.data(),
                         c.ln1_rstd.data(), len, d);
      c.a.resize(len * 3 * d);
      detail::linear(c.h1.data(), w.a_w.ptr(), w.a_b.ptr(), c.a.data(), len, d, 3 * d);
      if (forced) detail::apply_forcing(c.a.data(), len, 3 * d, opts.force_from, (*forced)[0]);

      // Causal multi-head attention; att holds softmax rows, zero above the diagonal.
      c.att.assign(heads * len * len, T(0));
      c.y.assign(len * d, T(0));
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          const T* q = c.a.data() + i * 3 * d + h * hd;
          T* row = c.att.data() + (h * len + i) * len;
          T maxv = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j <= i; ++j) {
            const T* k = c.a.data() + j * 3 * d + d + h * hd;
            T s = 0;
            for (std::size_t t = 0; t < hd; ++t) s += q[t] * k[t];
            row[j] = s * scale;
            maxv = std::max(maxv, row[j]);
          }
          T sum = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            row[j] = std::exp(row[j] - maxv);
            sum += row[j];
          }
          for (std::size_t j = 0; j <= i; ++j) row[j] /= sum;
          T* yo = c.y.data() + i * d + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* v = c.a.data() + j * 3 * d + 2 * d + h * hd;
            for (std::size_t t = 0; t < hd; ++t) yo[t] += row[j] * v[t];
          }
        }
      }

      std::vector<T> proj(len * d);
      detail::linear(c.y.data(), w.aproj_w.ptr(), w.aproj_b.ptr(), proj.data(), len, d, d);
      if (forced) detail::apply_forcing(proj.data(), len, d, opts.force_from, (*forced)[1]);
      aproj_out_(c, proj);
      for (std::size_t i = 0; i < len * d; ++i) x[i] += proj[i];
      c.x_mid = x;

      c.ln2_xhat.resize(len * d);
      c.ln2_rstd.resize(len);
      c.h2.resize(len * d);
      detail::layer_norm(x.data(), w.ln2_g.ptr(), w.ln2_b.ptr(), c.h2.data(), c.ln2_xhat.data(),
                         c.ln2_rstd.data(), len, d);
      c.b.resize(len * 4 * d);
      detail::linear(c.h2.data(), w.b_w.ptr(), w.b_b.ptr(), c.b.data(), len, d, 4 * d);
      if (forced) detail::apply_forcing(c.b.data(), len, 4 * d, opts.force_from, (*forced)[2]);
      c.g.resize(len * 4 * d);
      for (std::size_t i = 0; i < c.b.size(); ++i) c.g[i] = detail::gelu(c.b[i]);

      detail::linear(c.g.data(), w.bproj_w.ptr(), w.bproj_b.ptr(), proj.data(), len, 4 * d, d);
      if (forced) detail::apply_forcing(proj.data(), len, d, opts.force_from, (*forced)[3]);
      bproj_out_(c, proj);
      for (std::size_t i = 0; i < len * d; ++i) x[i] += proj[i];
    }

    cache.x_final = x;
    cache.lnf_xhat.resize(len * d);
    cache.lnf_rstd.resize(len);
    cache.hf.resize(len * d);
    detail::layer_norm(x.data(), weights_.lnf_g.ptr(), weights_.lnf_b.ptr(), cache.hf.data(),
                       cache.lnf_xhat.data(), cache.lnf_rstd.data(), len, d);
    cache.logits.resize(len * config_.vocab_size);
    detail::linear(cache.hf.data(), weights_.head_w.ptr(), static_cast<const T*>(nullptr),
                   cache.logits.data(), len, d, config_.vocab_size);
  }

  // Max over positions of every probed unit, in catalog order. Requires a
  // cache filled by forward().
  std::vector<T> tap(const ForwardCache<T>& cache) const {
    const std::size_t d = config_.model_dim;
    const std::size_t len = cache.length;
    std::vector<T> out(9 * d * config_.num_blocks, -std::numeric_limits<T>::infinity());
    for (std::size_t bi = 0; bi < config_.num_blocks; ++bi) {
      const auto& c = cache.blocks[bi];
      T* base = out.data() + bi * 9 * d;
      auto pool = [&](const std::vector<T>& values, std::size_t width, T* dst) {
        for (std::size_t p = 0; p < len; ++p)
          for (std::size_t j = 0; j < width; ++j) dst[j] = std::max(dst[j], values[p * width + j]);
      };
      pool(c.a, 3 * d, base);
      pool(c.aproj, d, base + 3 * d);
      pool(c.b, 4 * d, base + 4 * d);
      pool(c.bproj, d, base + 8 * d);
    }
    return out;
  }

  // Gradients of sum_t dlogits[t] . logits[t] with respect to every
  // parameter, accumulated into grads. The cache must come from an unforced
  // forward pass.
  void backward(std::span<const std::int32_t> tokens, const ForwardCache<T>& cache,
                std::span<const T> dlogits, TlmWeights<T>& grads) const {
    const std::size_t len = cache.length;
    const std::size_t d = config_.model_dim;
    const std::size_t heads = config_.num_heads;
    const std::size_t hd = d / heads;
    const std::size_t vocab = config_.vocab_size;
    const T scale = T(1) / std::sqrt(T(hd));

    std::vector<T> dhf(len * d);
    detail::linear_backward(cache.hf.data(), weights_.head_w.ptr(), dlogits.data(),
                            grads.head_w.ptr(), static_cast<T*>(nullptr), dhf.data(), len, d, vocab);
    std::vector<T> dx(len * d, T(0));
    detail::layer_norm_backward(dhf.data(), cache.lnf_xhat.data(), cache.lnf_rstd.data(),
                                weights_.lnf_g.ptr(), grads.lnf_g.ptr(), grads.lnf_b.ptr(), dx.data(),
                                len, d);

    std::vector<T> dproj(len * d), dg(len * 4 * d), dh(len * d), dy(len * d), da(len * 3 * d);
    for (std::size_t bi = config_.num_blocks; bi-- > 0;) {
      const auto& w = weights_.blocks[bi];
      auto& gw = grads.blocks[bi];
      const auto& c = cache.blocks[bi];

      // MLP branch.
      detail::linear_backward(c.g.data(), w.bproj_w.ptr(), dx.data(), gw.bproj_w.ptr(),
                              gw.bproj_b.ptr(), dg.data(), len, 4 * d, d);
      for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= detail::gelu_grad(c.b[i]);
      detail::linear_backward(c.h2.data(), w.b_w.ptr(), dg.data(), gw.b_w.ptr(), gw.b_b.ptr(),
                              dh.data(), len, d, 4 * d);
      detail::layer_norm_backward(dh.data(), c.ln2_xhat.data(), c.ln2_rstd.data(), w.ln2_g.ptr(),
                                  gw.ln2_g.ptr(), gw.ln2_b.ptr(), dx.data(), len, d);

      // Attention branch.
      detail::linear_backward(c.y.data(), w.aproj_w.ptr(), dx.data(), gw.aproj_w.ptr(),
                              gw.aproj_b.ptr(), dy.data(), len, d, d);
      std::fill(da.begin(), da.end(), T(0));
      std::vector<T> dp(len);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          const T* row = c.att.data() + (h * len + i) * len;
          const T* gy = dy.data() + i * d + h * hd;
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* v = c.a.data() + j * 3 * d + 2 * d + h * hd;
            T* dv = da.data() + j * 3 * d + 2 * d + h * hd;
            T s = 0;
            for (std::size_t t = 0; t < hd; ++t) {
              s += gy[t] * v[t];
              dv[t] += row[j] * gy[t];
            }
            dp[j] = s;
            dot += row[j] * s;
          }
          const T* q = c.a.data() + i * 3 * d + h * hd;
          T* dq = da.data() + i * 3 * d + h * hd;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = row[j] * (dp[j] - dot) * scale;
            const T* k = c.a.data() + j * 3 * d + d + h * hd;
            T* dk = da.data() + j * 3 * d + d + h * hd;
            for (std::size_t t = 0; t < hd; ++t) {
              dq[t] += ds * k[t];
              dk[t] += ds * q[t];
            }
          }
        }
      }
      detail::linear_backward(c.h1.data(), w.a_w.ptr(), da.data(), gw.a_w.ptr(), gw.a_b.ptr(),
                              dh.data(), len, d, 3 * d);
      detail::layer_norm_backward(dh.data(), c.ln1_xhat.data(), c.ln1_rstd.data(), w.ln1_g.ptr(),
                                  gw.ln1_g.ptr(), gw.ln1_b.ptr(), dx.data(), len, d);
    }

    for (std::size_t p = 0; p < len; ++p) {
      T* te = grads.wte.ptr() + static_cast<std::size_t>(tokens[p]) * d;
      T* pe = grads.wpe.ptr() + p * d;
      for (std::size_t j = 0; j < d; ++j) {
        te[j] += dx[p * d + j];
        pe[j] += dx[p * d + j];
      }
    }
  }

  // Next-token cross entropy over positions 0..L-2, each term weighted by
  // `weight`. Returns the unweighted sum of per-position losses and adds the
  // weighted gradient into grads.
  double loss_and_grad(std::span<const std::int32_t> tokens, T weight, TlmWeights<T>& grads,
                       ForwardCache<T>& cache) const {
    require(tokens.size() >= 2, ErrorCode::InvalidArgument, "need two tokens for a loss");
    forward(tokens, cache);
    const std::size_t len = tokens.size();
    const std::size_t vocab = config_.vocab_size;
    std::vector<T> dlogits(len * vocab, T(0));
    double loss = 0.0;
    for (std::size_t p = 0; p + 1 < len; ++p) {
      const T* lg = cache.logits.data() + p * vocab;
      T* dl = dlogits.data() + p * vocab;
      const T maxv = *std::max_element(lg, lg + vocab);
      T sum = 0;
      for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(lg[v] - maxv);
      const auto target = static_cast<std::size_t>(tokens[p + 1]);
      loss += static_cast<double>(std::log(sum) + maxv - lg[target]);
      for (std::size_t v = 0; v < vocab; ++v) dl[v] = weight * std::exp(lg[v] - maxv) / sum;
      dl[target] -= weight;
    }
    backward(tokens, cache, dlogits, grads);
    return loss;
  }

  // Mean next-token loss of one sequence; no gradients.
  double loss(std::span<const std::int32_t> tokens) const {
    ForwardCache<T> cache;
    forward(tokens, cache);
    const std::size_t vocab = config_.vocab_size;
    double total = 0.0;
    for (std::size_t p = 0; p + 1 < tokens.size(); ++p) {
      const T* lg = cache.logits.data() + p * vocab;
      const T maxv = *std::max_element(lg, lg + vocab);
      T sum = 0;
      for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(lg[v] - maxv);
      total += static_cast<double>(std::log(sum) + maxv - lg[static_cast<std::size_t>(tokens[p + 1])]);
    }
    return total / static_cast<double>(tokens.size() - 1);
  }

 private:
  static void aproj_out_(BlockCache<T>& c, const std::vector<T>& v) { c.aproj = v; }
  static void bproj_out_(BlockCache<T>& c, const std::vector<T>& v) { c.bproj = v; }

  TlmConfig config_;
  TlmWeights<T> weights_;
};

// Logits plus the max-pooled tap vector of one sequence.
template <typename T>
struct InstrumentedOutput {
  std::vector<T> logits;  // L x V
  std::vector<T> tap;     // M
};

template <typename T>
InstrumentedOutput<T> forward_instrumented(const Tlm<T>& model, std::span<const std::int32_t> tokens) {
  ForwardCache<T> cache;
  model.forward(tokens, cache);
  return {cache.logits, model.tap(cache)};
}

struct ForceOptions {
  // false: force only positions from `generated_from` on (generated tokens).
  bool force_context = true;
  std::size_t generated_from = 0;
};

template <typename T>
std::vector<T> force_and_forward(const Tlm<T>& model, std::span<const std::int32_t> tokens,
                                 const ForcingPlan& plan, const ForceOptions& opts = {}) {
  const auto resolved = resolve_plan<T>(plan, model.catalog());
  ForwardCache<T> cache;
  ForwardOptions<T> fo;
  fo.plan = plan.empty() ? nullptr : &resolved;
  fo.force_from = opts.force_context ? 0 : opts.generated_from;
  model.forward(tokens, cache, fo);
  return cache.logits;
}

}  // namespace nscope::tlm
