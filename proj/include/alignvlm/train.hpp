#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "alignvlm/model.hpp"
#include "alignvlm/synth.hpp"

namespace alignvlm {

struct StageConfig {
  int stage = 1;
  bool train_encoder = true;
  bool train_connector = true;
  bool train_decoder = true;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  std::size_t dataset_size = 4096;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t max_steps = 0;  // 0 = no cap

  bool trains(ParamGroup g) const {
    switch (g) {
      case ParamGroup::Encoder: return train_encoder;
      case ParamGroup::Connector: return train_connector;
      case ParamGroup::Decoder: return train_decoder;
    }
    return false;
  }

  void validate() const {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    if (stage == 3 && train_encoder) throw ConfigError("stage 3 keeps the vision encoder frozen");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (lr < 0) throw ConfigError("learning rate must be non-negative");
    if (workers == 0) throw ConfigError("workers must be at least 1");
  }

  /// Desk-scale defaults for the three stages.
  static StageConfig defaults(int stage, std::uint64_t seed = 1) {
    StageConfig c;
    c.stage = stage;
    c.seed = seed;
    if (stage == 3) {
      c.train_encoder = false;
      c.lr = 3e-4;
      c.dataset_size = 1024;
    }
    c.validate();
    return c;
  }

  DocStyle style() const {
    return stage == 1 ? DocStyle::Caption : stage == 2 ? DocStyle::Page : DocStyle::Instruction;
  }
};

/// Adam with bias correction; moments are keyed by parameter name.
template <class T>
class Adam {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::string& name, Tensor<T>& param) {
    if (!param.has_grad()) return;
    auto& mom = moments_[name];
    if (mom.m.size() != param.size()) {
      mom.m.assign(param.size(), T(0));
      mom.v.assign(param.size(), T(0));
    }
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
      const T g = param.grad[i];
      mom.m[i] = T(beta1_) * mom.m[i] + T(1 - beta1_) * g;
      mom.v[i] = T(beta2_) * mom.v[i] + T(1 - beta2_) * g * g;
      const double mhat = double(mom.m[i]) / c1, vhat = double(mom.v[i]) / c2;
      param[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }

  void begin_step() { ++t_; }
  std::uint64_t steps() const { return t_; }
  double lr() const { return lr_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct StepRecord {
  int stage = 0;
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

/// Everything train_stage needs to continue a stage where it stopped.
template <class T>
struct StageResult {
  std::vector<StepRecord> log;  // steps run by this call only
  Adam<T> optimizer{0.0};
  std::size_t next_step = 0;
  std::string epoch_rng;  // shuffle RNG state at the start of the current epoch
  double initial_loss = -1;
  std::size_t steps_above = 0;
  bool complete = false;
};

namespace detail {

template <class T>
using GradList = std::vector<std::pair<Tensor<T>*, std::vector<T>>>;

// Loss sum and per-node parameter gradients of one example, seeded with
// `seed` so that the batch mean comes out of a plain sum.
template <class T>
double example_grads(VlmModel<T>& m, const Example<T>& ex, T seed, GradList<T>* out) {
  Graph<T> g;
  auto [loss, n] = example_loss(g, m, ex);
  (void)n;
  const double value = loss.value()[0];
  g.backward(loss, Tensor<T>({1}, {seed}), out == nullptr);
  if (out) {
    for (auto [param, grad] : g.bound_grads()) out->emplace_back(param, *grad);
  }
  return value;
}

}  // namespace detail

/// Trains the flagged parameter groups with Adam on `data` for cfg.epochs,
/// reshuffling each epoch from cfg.seed. Frozen groups are never written.
/// Gradients of a batch are summed in example order whatever the worker
/// count, so results do not depend on cfg.workers. Passing the result of a
/// run stopped by cfg.max_steps as `resume` continues it exactly.
template <class T>
StageResult<T> train_stage(const StageConfig& cfg, VlmModel<T>& model,
                           const std::vector<Example<T>>& data,
                           const std::function<void(const StepRecord&)>& on_step = {},
                           const StageResult<T>* resume = nullptr) {
  cfg.validate();
  if (data.empty()) throw InputError("training set is empty");
  StageResult<T> result;
  result.optimizer = Adam<T>(cfg.lr);
  std::vector<std::pair<std::string, Tensor<T>*>> trainable;
  model.for_each_param([&](const std::string& name, Tensor<T>& t, ParamGroup gr) {
    t.requires_grad = cfg.trains(gr);
    t.clear_grad();
    if (t.requires_grad) trainable.emplace_back(name, &t);
  });

  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  Rng rng(derive_seed(cfg.seed, "stage" + std::to_string(cfg.stage)));
  std::size_t step = 0;
  if (resume) {
    if (resume->complete) throw ConfigError("stage " + std::to_string(cfg.stage) + " already complete");
    rng.set_state(resume->epoch_rng);
    step = resume->next_step;
    result.optimizer = resume->optimizer;
    result.initial_loss = resume->initial_loss;
    result.steps_above = resume->steps_above;
  }
  std::vector<std::size_t> order(data.size());
  bool stopped = false;
  for (std::size_t epoch = step / steps_per_epoch; epoch < cfg.epochs && !stopped; ++epoch) {
    result.epoch_rng = rng.state();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t b = step % steps_per_epoch; b < steps_per_epoch; ++b) {
      if (cfg.max_steps && step >= cfg.max_steps) {
        stopped = true;
        break;
      }
      const std::size_t start = b * cfg.batch_size;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::size_t count = 0;
      for (std::size_t i = start; i < end; ++i) count += data[order[i]].target.size();
      const T seed = T(1) / T(count);
      for (auto& [name, t] : trainable) t->zero_grad();

      double loss_sum = 0;
      if (cfg.workers <= 1) {
        for (std::size_t i = start; i < end; ++i)
          loss_sum += detail::example_grads<T>(model, data[order[i]], seed, nullptr);
      } else {
        const std::size_t nb = end - start;
        std::vector<detail::GradList<T>> grads(nb);
        std::vector<double> losses(nb);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(cfg.workers, nb); ++w) {
          pool.emplace_back([&, w] {
            for (std::size_t j = w; j < nb; j += cfg.workers)
              losses[j] = detail::example_grads(model, data[order[start + j]], seed, &grads[j]);
          });
        }
        for (auto& th : pool) th.join();
        for (std::size_t j = 0; j < nb; ++j) {
          loss_sum += losses[j];
          for (auto& [param, grad] : grads[j])
            for (std::size_t k = 0; k < grad.size(); ++k) param->grad[k] += grad[k];
        }
      }
      const double loss = loss_sum / double(count);
      if (!std::isfinite(loss)) {
        throw DivergenceError(cfg.stage, "stage " + std::to_string(cfg.stage) +
                                             ": non-finite loss at step " + std::to_string(step));
      }
      if (result.initial_loss < 0) result.initial_loss = loss;
      result.steps_above = loss > 10.0 * result.initial_loss ? result.steps_above + 1 : 0;
      if (result.steps_above >= 50) {
        throw DivergenceError(cfg.stage, "stage " + std::to_string(cfg.stage) +
                                             ": loss above 10x its initial value (" +
                                             std::to_string(result.initial_loss) +
                                             ") for 50 consecutive steps, last " +
                                             std::to_string(loss) + " at step " +
                                             std::to_string(step));
      }
      result.optimizer.begin_step();
      for (auto& [name, t] : trainable) result.optimizer.step(name, *t);
      StepRecord rec{cfg.stage, step, epoch, loss};
      result.log.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  result.next_step = step;
  result.complete = !stopped;
  model.for_each_param([](const std::string&, Tensor<T>& t, ParamGroup) {
    t.clear_grad();
    t.requires_grad = false;
  });
  model.decoder.embed.refresh_bounds();
  return result;
}

struct EvalMetrics {
  double token_accuracy = 0;
  double mean_loss = 0;
  std::size_t tokens = 0;
  std::size_t docs = 0;
  friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

template <class T>
using OptionsFor = std::function<ForwardOptions<T>(std::size_t)>;

namespace detail {

template <class T>
std::size_t argmax_row(const Tensor<T>& m, std::size_t r) {
  const auto row = m.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace detail

/// Greedy decoding of one example; returns the generated ids and the
/// teacher-forced loss sum. Because position i only sees inputs up to i,
/// a teacher-forced pass agrees with greedy decoding up to the first
/// mismatch, so one pass per mismatch reproduces greedy decoding exactly.
template <class T>
std::pair<std::vector<std::size_t>, double> greedy_decode(const VlmModel<T>& m,
                                                          const Example<T>& ex,
                                                          const ForwardOptions<T>& opt = {}) {
  Tensor<T> vision;
  {
    Graph<T> g;
    vision = vision_forward(g, m, ex.patches, opt).connector.tokens.value();
  }
  auto [text, targets] = teacher_forcing(ex);
  std::vector<std::size_t> hyp = ex.target;
  const std::size_t first = ex.prompt.size() - 1, len = hyp.size();
  double loss = 0;
  bool first_pass = true;
  std::size_t fixed = 0;
  while (fixed < len) {
    std::vector<std::size_t> input = ex.prompt;
    input.insert(input.end(), hyp.begin(), hyp.end() - 1);
    Graph<T> g;
    auto logits = decode_logits(g, m.decoder, g.constant(vision), input);
    if (first_pass) {
      loss = cross_entropy(logits, targets, false).value()[0];
      first_pass = false;
    }
    const auto& lv = logits.value();
    std::size_t i = fixed;
    for (; i < len; ++i) {
      const std::size_t pred = detail::argmax_row(lv, first + i);
      if (pred != hyp[i]) {
        hyp[i] = pred;
        break;
      }
    }
    fixed = i + 1;
  }
  return {hyp, loss};
}

/// Greedy-decoding token accuracy and teacher-forced mean loss.
template <class T>
EvalMetrics evaluate(const VlmModel<T>& m, const std::vector<Example<T>>& split,
                     const OptionsFor<T>& options = {}) {
  if (split.empty()) throw InputError("evaluation split is empty");
  EvalMetrics out;
  std::size_t correct = 0;
  double loss = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const ForwardOptions<T> opt = options ? options(i) : ForwardOptions<T>{};
    auto [hyp, l] = greedy_decode(m, split[i], opt);
    for (std::size_t k = 0; k < hyp.size(); ++k) correct += hyp[k] == split[i].target[k];
    out.tokens += hyp.size();
    loss += l;
  }
  out.docs = split.size();
  out.token_accuracy = double(correct) / double(out.tokens);
  out.mean_loss = loss / double(out.tokens);
  return out;
}

}  // namespace alignvlm
