#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "neuronscope/detail/parallel.hpp"
#include "neuronscope/detail/random.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/tlm/model.hpp"

namespace nscope::tlm {

struct TrainOptions {
  std::size_t steps = 500;
  double learning_rate = 3e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  // Linear decay of the learning rate to this fraction by the last step.
  double final_lr_fraction = 0.1;
  std::size_t jobs = 1;
  // Called after every step with (step, mean per-token loss).
  std::function<void(std::size_t, double)> on_step;
};

struct TrainReport {
  std::vector<double> losses;  // mean per-token loss of each step's batch
};

template <typename T>
class Adam {
 public:
  Adam(const TlmWeights<T>& shape, const TrainOptions& opts) : m_(shape), v_(shape), opts_(opts) {
    m_.zero();
    v_.zero();
  }

  void step(TlmWeights<T>& params, const TlmWeights<T>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    std::vector<Tensor<T>*> p, m, v;
    std::vector<const Tensor<T>*> g;
    params.visit([&](const std::string&, Tensor<T>& t) { p.push_back(&t); });
    m_.visit([&](const std::string&, Tensor<T>& t) { m.push_back(&t); });
    v_.visit([&](const std::string&, Tensor<T>& t) { v.push_back(&t); });
    grads.visit([&](const std::string&, const Tensor<T>& t) { g.push_back(&t); });
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto& pd = p[k]->data;
      auto& md = m[k]->data;
      auto& vd = v[k]->data;
      const auto& gd = g[k]->data;
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double gi = static_cast<double>(gd[i]);
        const double mi = opts_.beta1 * static_cast<double>(md[i]) + (1.0 - opts_.beta1) * gi;
        const double vi = opts_.beta2 * static_cast<double>(vd[i]) + (1.0 - opts_.beta2) * gi * gi;
        md[i] = T(mi);
        vd[i] = T(vi);
        pd[i] -= T(lr * (mi / c1) / (std::sqrt(vi / c2) + opts_.epsilon));
      }
    }
  }

 private:
  TlmWeights<T> m_, v_;
  TrainOptions opts_;
  std::uint64_t t_ = 0;
};

template <typename T>
double gradient_norm(const TlmWeights<T>& grads) {
  double s = 0.0;
  grads.visit([&](const std::string&, const Tensor<T>& t) {
    for (auto v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(s);
}

// Next-token cross-entropy with Adam. Each step draws a seeded batch of
// sequences; per-sequence gradients are computed in private buffers and
// summed in batch order, so the result does not depend on `jobs`.
template <typename T>
TrainReport train(Tlm<T>& model, std::span<const std::vector<std::int32_t>> corpus,
                  const TrainOptions& opts) {
  require(!corpus.empty(), ErrorCode::EmptyInput, "training corpus is empty");
  require(opts.batch_size > 0, ErrorCode::InvalidArgument, "batch_size must be positive");
  require(opts.learning_rate > 0.0, ErrorCode::InvalidArgument, "learning_rate must be positive");
  for (const auto& s : corpus) {
    require(s.size() >= 2, ErrorCode::InvalidArgument, "training sequences need two tokens");
    model.check_tokens(s);
  }

  nscope::detail::Rng rng(opts.seed);
  Adam<T> adam(model.weights(), opts);
  TlmWeights<T> total(model.config());
  std::vector<TlmWeights<T>> per_seq(opts.batch_size, TlmWeights<T>(model.config()));
  std::vector<double> seq_loss(opts.batch_size);
  std::vector<std::size_t> batch(opts.batch_size);
  TrainReport report;
  report.losses.reserve(opts.steps);

  for (std::size_t step = 0; step < opts.steps; ++step) {
    std::size_t predicted = 0;
    for (auto& b : batch) {
      b = nscope::detail::uniform_index(rng, corpus.size());
      predicted += corpus[b].size() - 1;
    }
    const T weight = T(1.0 / static_cast<double>(predicted));
    nscope::detail::parallel_for(batch.size(), opts.jobs, [&](std::size_t i) {
      per_seq[i].zero();
      ForwardCache<T> cache;
      seq_loss[i] = model.loss_and_grad(corpus[batch[i]], weight, per_seq[i], cache);
    });

    double loss = 0.0;
    for (auto l : seq_loss) loss += l;
    loss /= static_cast<double>(predicted);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss " << loss << " at step " << step << " (lr " << opts.learning_rate
          << ", batch " << opts.batch_size << ")";
      fail(ErrorCode::NonFiniteLoss, msg.str());
    }

    total.zero();
    std::vector<Tensor<T>*> dst;
    total.visit([&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
    for (const auto& g : per_seq) {
      std::size_t k = 0;
      g.visit([&](const std::string&, const Tensor<T>& t) {
        auto& d = dst[k++]->data;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += t.data[i];
      });
    }
    if (opts.clip_norm > 0.0) {
      const double norm = gradient_norm(total);
      if (norm > opts.clip_norm) {
        const T s = T(opts.clip_norm / norm);
        total.visit([&](const std::string&, Tensor<T>& t) {
          for (auto& v : t.data) v *= s;
        });
      }
    }
    const double progress = opts.steps > 1 ? static_cast<double>(step) / (opts.steps - 1) : 0.0;
    const double lr = opts.learning_rate * (1.0 - (1.0 - opts.final_lr_fraction) * progress);
    adam.step(model.weights(), total, lr);
    report.losses.push_back(loss);
    if (opts.on_step) opts.on_step(step, loss);
  }
  return report;
}

}  // namespace nscope::tlm
