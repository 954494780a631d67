#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mast/errors.hpp"
#include "mast/metrics.hpp"
#include "mast/model.hpp"

namespace mast {

// ---------------------------------------------------------------------------
// Losses. Each returns the loss and writes d(loss)/d(logits) when asked.

/// Mean over classes of the logistic loss, in the overflow-free form
/// max(z, 0) - z*y + log1p(exp(-|z|)).
template <typename T>
double bce_with_logits(std::span<const T> logits, std::span<const T> targets,
                       std::vector<T>* grad = nullptr) {
  if (logits.size() != targets.size())
    throw DimensionError("bce_with_logits: " + std::to_string(logits.size()) + " logits vs " +
                         std::to_string(targets.size()) + " targets");
  if (logits.empty()) throw DimensionError("bce_with_logits: empty input");
  const double n = static_cast<double>(logits.size());
  double loss = 0;
  if (grad) grad->assign(logits.size(), T{0});
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], y = targets[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    if (grad) {
      const double sig = z >= 0 ? 1 / (1 + std::exp(-z)) : std::exp(z) / (1 + std::exp(z));
      (*grad)[i] = static_cast<T>((sig - y) / n);
    }
  }
  return loss / n;
}

/// -log softmax(logits)[label].
template <typename T>
double cross_entropy(std::span<const T> logits, std::size_t label, std::vector<T>* grad = nullptr) {
  if (label >= logits.size())
    throw InputError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  double mx = -std::numeric_limits<double>::infinity();
  for (T z : logits) mx = std::max(mx, static_cast<double>(z));
  double sum = 0;
  for (T z : logits) sum += std::exp(static_cast<double>(z) - mx);
  const double lse = mx + std::log(sum);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      (*grad)[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - lse) -
                                  (i == label ? 1.0 : 0.0));
  }
  return lse - static_cast<double>(logits[label]);
}

// ---------------------------------------------------------------------------
// Optimizer

enum class LossKind { BceMultilabel, CeSinglelabel };

inline std::string to_string(LossKind k) {
  return k == LossKind::BceMultilabel ? "bce-multilabel" : "ce-singlelabel";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "bce" || s == "bce-multilabel") return LossKind::BceMultilabel;
  if (s == "ce" || s == "ce-singlelabel") return LossKind::CeSinglelabel;
  throw ConfigError("unknown loss '" + s + "' (expected bce or ce)");
}

struct TrainConfig {
  double base_lr = 1e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::BceMultilabel;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  void validate() const {
    if (!(base_lr >= 0)) throw ConfigError("base_lr must be non-negative");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("betas must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"base_lr", c.base_lr},     {"weight_decay", c.weight_decay},
                     {"betas", {c.beta1, c.beta2}}, {"adam_eps", c.adam_eps},
                     {"epochs", c.epochs},       {"batch_size", c.batch_size},
                     {"loss", to_string(c.loss)}, {"seed", c.seed},
                     {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    c.beta1 = j.at("betas").at(0).get<double>();
    c.beta2 = j.at("betas").at(1).get<double>();
  }
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.loss = loss_kind_from_string(j.value("loss", to_string(c.loss)));
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
}

template <typename T>
struct OptimizerState {
  ModelParams<T> m, v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const ModelParams<T>& p) {
    return {ModelParams<T>::zeros_like(p), ModelParams<T>::zeros_like(p), 0};
  }
};

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
template <typename T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& state,
                const TrainConfig& cfg, double lr) {
  ++state.step;
  const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, theta] : params.tensors) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    if (g.shape() != theta.shape() || m.shape() != theta.shape())
      throw DimensionError("adamw_step: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update =
          (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps) + cfg.weight_decay * theta[i];
      theta[i] = static_cast<T>(theta[i] - lr * update);
    }
  }
}

/// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step > total_steps) step = total_steps;
  const double lr = 0.5 * base_lr *
                    (1 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                  static_cast<double>(total_steps)));
  return std::max(lr, 0.0);
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
  std::size_t samples = 256;
  double eps = 1e-5;
  double init_std = 0.1;
  double floor = 1e-6;
  std::string corrupt;  // negate the analytic gradient of this tensor
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst;  // "name[index]"
  double worst_analytic = 0, worst_numeric = 0;
};

inline nlohmann::json to_json(const GradCheckReport& r) {
  return {{"max_rel_error", r.max_rel_error},
          {"coordinates", r.coordinates},
          {"worst", r.worst},
          {"worst_analytic", r.worst_analytic},
          {"worst_numeric", r.worst_numeric}};
}

/// Compares analytic gradients against central differences at the given
/// (tensor, index) coordinates. `loss` is evaluated on the perturbed params.
inline GradCheckReport check_gradients(
    ModelParams<double>& params, const ModelParams<double>& analytic,
    const std::vector<std::pair<std::string, std::size_t>>& coords,
    const std::function<double(const ModelParams<double>&)>& loss, double eps, double floor) {
  GradCheckReport r;
  for (const auto& [name, idx] : coords) {
    double& x = params.at(name)[idx];
    const double orig = x;
    x = orig + eps;
    const double fp = loss(params);
    x = orig - eps;
    const double fm = loss(params);
    x = orig;
    const double numeric = (fp - fm) / (2 * eps);
    const double a = analytic.at(name)[idx];
    const double err = relative_error(a, numeric, floor);
    ++r.coordinates;
    if (err > r.max_rel_error || r.worst.empty()) {
      r.max_rel_error = std::max(r.max_rel_error, err);
      r.worst = name + "[" + std::to_string(idx) + "]";
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  return r;
}

/// Gradient check of the full network under a BCE loss with random inputs
/// and targets, in double precision.
inline GradCheckReport grad_check(const StageSchedule& s, std::uint64_t seed,
                                  const GradCheckOptions& opt = {}) {
  s.validate();
  ModelParams<double> params = init_params<double>(s, seed, opt.init_std);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Tensor<double> input({s.input_freq, s.input_time});
  for (auto& v : input.values()) v = uni(rng);
  std::vector<std::vector<double>> targets;
  for (auto c : s.head_sizes) {
    std::vector<double> t(c);
    for (auto& v : t) v = (rng() & 1u) ? 1.0 : 0.0;
    targets.push_back(std::move(t));
  }
  const auto loss = [&](const ModelParams<double>& p) {
    const auto out = forward(input, p, s);
    double total = 0;
    for (std::size_t h = 0; h < out.logits.size(); ++h)
      total += bce_with_logits<double>(out.logits[h], targets[h]);
    return total;
  };

  ForwardCache<double> cache;
  const auto out = forward(input, params, s, &cache);
  std::vector<std::vector<double>> dlogits(out.logits.size());
  for (std::size_t h = 0; h < out.logits.size(); ++h)
    bce_with_logits<double>(out.logits[h], targets[h], &dlogits[h]);
  ModelParams<double> analytic = backward(cache, params, s, dlogits);
  if (!opt.corrupt.empty()) {
    for (auto& v : analytic.at(opt.corrupt).values()) v = -v;
  }

  // One coordinate per tensor, then uniform over all scalars.
  std::vector<std::pair<std::string, std::size_t>> coords;
  std::vector<std::pair<std::string, std::size_t>> flat_index;
  std::size_t total = 0;
  for (const auto& [name, t] : params.tensors) {
    coords.emplace_back(name, rng() % t.size());
    flat_index.emplace_back(name, total);
    total += t.size();
  }
  while (coords.size() < opt.samples) {
    const std::size_t k = rng() % total;
    auto it = std::upper_bound(flat_index.begin(), flat_index.end(), k,
                               [](std::size_t v, const auto& e) { return v < e.second; });
    --it;
    coords.emplace_back(it->first, k - it->second);
  }
  return check_gradients(params, analytic, coords, loss, opt.eps, opt.floor);
}

// ---------------------------------------------------------------------------
// Training loop

struct Example {
  Tensor<float> spec;                 // input_freq × input_time
  std::vector<std::size_t> labels;    // head 0
  std::vector<std::size_t> labels2;   // head 1, when present
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double metric = 0;  // running train top-1 (ce) or mAP (bce) on head 0
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"metric", e.metric}};
}

struct TrainResult {
  ModelParams<float> params;
  std::vector<EpochLog> log;
};

/// Checks every label against the schedule's head sizes before training.
inline void validate_examples(const std::vector<Example>& data, const StageSchedule& s) {
  if (data.empty()) throw InputError("dataset is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    if (ex.spec.rank() != 2 || ex.spec.dim(0) != s.input_freq || ex.spec.dim(1) != s.input_time)
      throw InputError("example " + std::to_string(i) + ": spectrogram shape " +
                       shape_str(ex.spec.shape()) + " does not match schedule input");
    if (ex.labels.empty()) throw InputError("example " + std::to_string(i) + " has no labels");
    const auto check = [&](const std::vector<std::size_t>& labels, std::size_t head) {
      for (auto l : labels)
        if (l >= s.head_sizes[head])
          throw InputError("example " + std::to_string(i) + ": label " + std::to_string(l) +
                           " out of range for head " + std::to_string(head) + " of size " +
                           std::to_string(s.head_sizes[head]));
    };
    check(ex.labels, 0);
    if (!ex.labels2.empty()) {
      if (s.head_sizes.size() < 2)
        throw InputError("example " + std::to_string(i) + " has second-head labels but the "
                         "schedule has a single head");
      check(ex.labels2, 1);
    }
  }
}

namespace detail {

// Loss and logit gradient for one example; sums over heads.
inline double example_loss(const std::vector<std::vector<float>>& logits, const Example& ex,
                           LossKind kind, std::vector<std::vector<float>>& dlogits) {
  dlogits.assign(logits.size(), {});
  double total = 0;
  for (std::size_t h = 0; h < logits.size(); ++h) {
    const auto& labels = h == 0 ? ex.labels : ex.labels2;
    if (labels.empty()) {
      dlogits[h].assign(logits[h].size(), 0.0f);
      continue;
    }
    if (kind == LossKind::CeSinglelabel) {
      total += cross_entropy<float>(logits[h], labels.front(), &dlogits[h]);
    } else {
      std::vector<float> target(logits[h].size(), 0.0f);
      for (auto l : labels) target[l] = 1.0f;
      total += bce_with_logits<float>(logits[h], target, &dlogits[h]);
    }
  }
  return total;
}

}  // namespace detail

/// AdamW with per-step cosine annealing over epochs × batches. Deterministic
/// for a fixed seed. `on_epoch` is called after every epoch.
inline TrainResult train_loop(const std::vector<Example>& data, const StageSchedule& s,
                              const TrainConfig& cfg,
                              const std::function<void(const EpochLog&)>& on_epoch = {},
                              const ModelParams<float>* init = nullptr) {
  cfg.validate();
  s.validate();
  validate_examples(data, s);
  if (cfg.epochs == 0) throw ConfigError("epochs must be at least 1");

  TrainResult result;
  result.params = init ? *init : init_params<float>(s, cfg.seed, cfg.init_std);
  check_params_match(result.params, s);
  OptimizerState<float> opt = OptimizerState<float>::for_params(result.params);

  const std::size_t n = data.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    double lr = 0;
    std::size_t correct = 0;
    std::vector<std::vector<double>> scores(n);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      ModelParams<float> grads = ModelParams<float>::zeros_like(result.params);
      std::vector<std::vector<float>> dlogits;
      for (std::size_t k = lo; k < hi; ++k) {
        const Example& ex = data[order[k]];
        ForwardCache<float> cache;
        const auto out = forward(ex.spec, result.params, s, &cache);
        loss_sum += detail::example_loss(out.logits, ex, cfg.loss, dlogits);
        const auto& l0 = out.logits[0];
        scores[order[k]].assign(l0.begin(), l0.end());
        const auto top = std::max_element(l0.begin(), l0.end()) - l0.begin();
        if (static_cast<std::size_t>(top) == ex.labels.front()) ++correct;
        const float inv = 1.0f / static_cast<float>(hi - lo);
        for (auto& d : dlogits)
          for (auto& v : d) v *= inv;
        const ModelParams<float> g = backward(cache, result.params, s, dlogits);
        for (auto& [name, t] : grads.tensors) add_inplace(t, g.at(name));
      }
      lr = cosine_lr(step, total_steps, cfg.base_lr);
      adamw_step(result.params, grads, opt, cfg, lr);
      ++step;
    }
    EpochLog entry{epoch, lr, loss_sum / static_cast<double>(n), 0.0};
    if (cfg.loss == LossKind::CeSinglelabel) {
      entry.metric = static_cast<double>(correct) / static_cast<double>(n);
    } else {
      std::vector<std::vector<int>> targets(n);
      for (std::size_t i = 0; i < n; ++i) {
        targets[i].assign(s.head_sizes[0], 0);
        for (auto l : data[i].labels) targets[i][l] = 1;
      }
      entry.metric = mean_average_precision(scores, targets);
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

}  // namespace mast
