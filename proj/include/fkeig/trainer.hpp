#pragma once
// Training loop: sample paths, propagate U, evaluate the fixed-point loss, and
// update both heads and lambda with Adam. Also the supervised regression used
// to seed a second-eigenpair run.

#include "fkeig/autodiff.hpp"
#include "fkeig/metrics.hpp"
#include "fkeig/network.hpp"
#include "fkeig/normalization.hpp"
#include "fkeig/problems.hpp"
#include "fkeig/rng.hpp"
#include "fkeig/sde.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fkeig {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Regression of both heads onto a target eigenfunction before training.
struct SupervisedInit {
  std::function<double(std::span<const double>)> psi;                      // psi_init
  std::function<void(std::span<const double>, std::span<double>)> grad;     // grad psi_init
  std::size_t steps = 2000;
  std::size_t batch = 512;
  double learning_rate = 1e-3;
};

struct TrainConfig {
  double horizon = 0.2;         // T
  std::size_t intervals = 80;   // N
  std::size_t batch = 1024;     // K
  std::size_t order = 5;        // M
  std::vector<std::size_t> hidden{80, 80, 80};

  double eta1 = 1000.0;
  double eta2 = 20.0;
  double eta3 = 100.0;
  double z0 = 2.0;
  ClipBounds clip{};

  Schedule learning_rate = Schedule({1e-4, 5e-5, 1e-5}, {30000, 60000});
  Schedule gamma = Schedule({0.2, 0.5, 0.9}, {30000, 60000});
  AdamConfig adam{};
  double grad_clip_norm = 0.0;  // 0 disables global-norm clipping

  std::size_t iterations = 80000;
  std::uint64_t seed = 1;
  double lambda_init = 0.0;
  std::size_t lambda_freeze_steps = 0;  // lambda held fixed for steps 1..freeze
  bool z_gradient = true;               // differentiate through the batch estimate of Z

  std::size_t record_every = 100;
  std::size_t validation_size = 0;  // 0 means the training batch size
  std::size_t final_window = 1000;  // final errors average records in the last this-many steps
  std::size_t reference_index = 0;  // which known eigenpair errors are measured against
  std::size_t workers = 1;
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (!(horizon > 0.0)) throw std::invalid_argument("T must be positive");
    if (intervals < 1) throw std::invalid_argument("N must be >= 1");
    if (batch < 1) throw std::invalid_argument("K must be >= 1");
    if (order < 1) throw std::invalid_argument("M must be >= 1");
    for (auto w : hidden) {
      if (w == 0) throw std::invalid_argument("hidden widths must be positive");
    }
    if (eta1 < 0.0 || eta2 < 0.0 || eta3 < 0.0) {
      throw std::invalid_argument("loss weights must be nonnegative");
    }
    clip.validate();
    for (double g : gamma.values()) {
      if (!(g >= 0.0 && g < 1.0)) throw std::invalid_argument("gamma values must lie in [0, 1)");
    }
    for (double lr : learning_rate.values()) {
      if (lr < 0.0) throw std::invalid_argument("learning rates must be nonnegative");
    }
    if (record_every < 1) throw std::invalid_argument("record interval must be >= 1");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  }
};

// ---------------------------------------------------------------- Adam

struct AdamState {
  struct Block {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;
  };
  std::vector<Block> blocks;
};

/// Parameter blocks in a fixed order: NetworkParams::tensors(), then lambda.
inline std::vector<std::span<double>> parameter_blocks(NetworkParams& p) {
  std::vector<std::span<double>> out;
  for (Tensor* t : p.tensors()) out.push_back(t->values());
  out.emplace_back(&p.lambda, 1);
  return out;
}

inline AdamState make_adam_state(std::span<const std::span<double>> params) {
  AdamState s;
  for (auto p : params) s.blocks.push_back({std::vector<double>(p.size(), 0.0),
                                            std::vector<double>(p.size(), 0.0), 0});
  return s;
}

/// One bias-corrected Adam step. Blocks with active[i] == false are left
/// untouched, including their moments and step counters.
inline void adam_step(std::span<const std::span<double>> params,
                      std::span<const std::vector<double>> grads, AdamState& state, double lr,
                      const AdamConfig& cfg, const std::vector<bool>& active = {}) {
  if (params.size() != grads.size() || params.size() != state.blocks.size()) {
    throw ShapeError("adam_step: parameter, gradient and state block counts differ");
  }
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (!active.empty() && !active[b]) continue;
    auto p = params[b];
    const auto& g = grads[b];
    auto& blk = state.blocks[b];
    if (g.size() != p.size() || blk.m.size() != p.size()) {
      throw ShapeError("adam_step: block " + std::to_string(b) + " size mismatch");
    }
    ++blk.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(blk.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(blk.t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      blk.m[i] = cfg.beta1 * blk.m[i] + (1.0 - cfg.beta1) * g[i];
      blk.v[i] = cfg.beta2 * blk.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = blk.m[i] / c1, vhat = blk.v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

/// Scales all gradients so their joint Euclidean norm is at most max_norm.
inline double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g) v *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------- loss

struct LossTerms {
  Var total;
  double terminal = 0.0;  // eta1 part
  double gradient = 0.0;  // eta2 part
  double hinge = 0.0;     // eta3 part
};

/// Loss of one batch (or shard) whose values U are already propagated:
///   (1/K) sum_k [eta1 (N_psi(X_T)/Z - U_T)^2 + eta2 |G(X_T) - sigma^T grad N_psi(X_T)/Z|^2]
///   + eta3 (Z0 - Z)^+
/// K is `total_paths` so shard losses add up to the full-batch loss. The hinge
/// is included only when `with_hinge` is set.
inline LossTerms loss(const PathBatch& batch, const BoundNetwork& net, Var z,
                      const ProblemSpec& problem, const TrainConfig& cfg, Var grad_head_terminal,
                      std::size_t total_paths, bool with_hinge = true) {
  if (batch.values.size() != batch.intervals() + 1) {
    throw std::invalid_argument("loss: batch values are not propagated");
  }
  Tape& tape = z.tape();
  const std::size_t kp = batch.paths;
  Var xt = tape.constant(batch.state(batch.intervals()));
  auto terminal = psi_input_gradient(net, xt);
  Var inv_z = reciprocal(z);
  Var psi_t = mul(terminal.value, broadcast_scalar(inv_z, kp, 1));
  Var scaled = matmul(terminal.gradient, tape.constant(problem.sigma));
  Var grad_t = mul(scaled, broadcast_scalar(inv_z, kp, batch.dim));
  const double inv_k = 1.0 / static_cast<double>(total_paths);
  Var t1 = scale(sum(square(sub(psi_t, batch.values.back()))), cfg.eta1 * inv_k);
  Var t2 = scale(sum(square(sub(grad_head_terminal, grad_t))), cfg.eta2 * inv_k);
  LossTerms out;
  out.terminal = t1.item();
  out.gradient = t2.item();
  out.total = add(t1, t2);
  if (with_hinge) {
    Var h = hinge_penalty(z, cfg.z0, cfg.eta3);
    out.hinge = h.item();
    out.total = add(out.total, h);
  }
  if (!std::isfinite(out.total.item())) {
    throw NumericalError("non-finite loss (terminal " + std::to_string(out.terminal) +
                             ", gradient " + std::to_string(out.gradient) + ")",
                         batch.intervals());
  }
  return out;
}

// ---------------------------------------------------------------- records

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lambda = 0.0;
  double z = 0.0;
  bool has_reference = false;
  double err_lambda = 0.0;
  double err_psi_l2 = 0.0;
  double err_psi_inf = 0.0;
  double err_grad = 0.0;
};

struct ValidationMetrics {
  double err_lambda = 0.0;
  double err_psi_l2 = 0.0;
  double err_psi_inf = 0.0;
  double err_grad = 0.0;
  std::vector<double> net_values;  // N_psi / Z
  std::vector<double> ref_values;  // sign-aligned reference / batch RMS
};

/// Errors of the current network against a known eigenpair on the given points.
inline ValidationMetrics validate_against(const NetworkParams& params, double z,
                                          const ProblemSpec& problem, const KnownEigenpair& ref,
                                          const Tensor& points) {
  const std::size_t kp = points.rows(), d = points.cols();
  Tensor psi = eval_psi(params, points);
  Tensor grad = eval_grad_head(params, points);
  std::vector<double> ref_psi(kp);
  Tensor ref_grad(kp, d);
  std::vector<double> raw(d);
  for (std::size_t k = 0; k < kp; ++k) {
    auto x = points.row(k);
    ref_psi[k] = ref.psi(x);
    ref.grad(x, raw);
    problem.scale_gradient(raw, ref_grad.row(k));
  }
  ValidationMetrics m;
  m.err_lambda = std::abs(params.lambda - ref.lambda);
  m.err_psi_l2 = err_psi_l2(psi.values(), z, ref_psi);
  m.err_psi_inf = err_psi_inf(psi.values(), z, ref_psi);
  const double s = reference_sign(psi.values(), z, ref_psi);
  for (double& g : ref_grad.values()) g *= s;
  // A vanishing field (e.g. an all-zero head) has no direction to compare; report NaN.
  auto nonzero = [](const Tensor& t) {
    return std::any_of(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; });
  };
  m.err_grad = nonzero(grad) && nonzero(ref_grad) ? err_grad(grad, ref_grad)
                                                   : std::numeric_limits<double>::quiet_NaN();
  double rr = 0.0;
  for (double v : ref_psi) rr += v * v;
  rr = std::sqrt(rr / static_cast<double>(kp));
  for (std::size_t k = 0; k < kp; ++k) {
    m.net_values.push_back(psi[k] / z);
    m.ref_values.push_back(s * ref_psi[k] / rr);
  }
  return m;
}

struct TrainSummary {
  double lambda = 0.0;
  double z = 0.0;
  bool has_reference = false;
  double reference_lambda = 0.0;
  double err_lambda = 0.0;
  double err_psi_l2 = 0.0;
  double err_psi_inf = 0.0;
  double err_grad = 0.0;
  std::size_t averaged_records = 0;
};

/// Averages records whose step lies in the last `window` steps of the run
/// (step > last - window); the step-0 record counts only when nothing else does.
inline TrainSummary summarize(std::span<const TrainRecord> history, std::size_t window) {
  TrainSummary s;
  if (history.empty()) return s;
  const auto& last = history.back();
  s.lambda = last.lambda;
  s.z = last.z;
  s.has_reference = last.has_reference;
  const std::size_t from = last.step > window ? last.step - window : 0;
  std::size_t n = 0;
  for (const auto& r : history) {
    bool in_window = r.step > from || (last.step == 0 && r.step == 0);
    if (!in_window) continue;
    s.err_lambda += r.err_lambda;
    s.err_psi_l2 += r.err_psi_l2;
    s.err_psi_inf += r.err_psi_inf;
    s.err_grad += r.err_grad;
    ++n;
  }
  if (n > 0) {
    s.err_lambda /= static_cast<double>(n);
    s.err_psi_l2 /= static_cast<double>(n);
    s.err_psi_inf /= static_cast<double>(n);
    s.err_grad /= static_cast<double>(n);
  }
  s.averaged_records = n;
  return s;
}

// ---------------------------------------------------------------- training

struct TrainState {
  NetworkParams params;
  NormState norm;
  AdamState adam;
  std::size_t step = 0;  // completed optimizer steps
  std::vector<TrainRecord> history;
};

struct TrainCallbacks {
  std::function<void(const TrainRecord&)> on_record;
  std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  TrainSummary summary;
  std::size_t clipped = 0;  // total clip activations over the run
};

inline TrainState initial_state(const ProblemSpec& problem, const TrainConfig& cfg) {
  TrainState s;
  s.params = init_network(problem.dim, cfg.order, cfg.hidden, cfg.lambda_init, cfg.seed);
  s.norm.gamma = cfg.gamma;
  s.norm.z0 = cfg.z0;
  s.norm.eta3 = cfg.eta3;
  auto blocks = parameter_blocks(s.params);
  s.adam = make_adam_state(blocks);
  return s;
}

namespace detail {

inline PathBatch slice_paths(const PathBatch& b, std::size_t start, std::size_t count) {
  PathBatch out;
  out.paths = count;
  out.dim = b.dim;
  out.grid = b.grid;
  const std::size_t n_int = b.intervals(), d = b.dim;
  out.states = Tensor((n_int + 1) * count, d);
  out.increments = Tensor(n_int * count, d);
  for (std::size_t n = 0; n <= n_int; ++n) {
    for (std::size_t k = 0; k < count; ++k) {
      auto src = b.states.row(n * b.paths + start + k);
      std::copy(src.begin(), src.end(), out.states.row(n * count + k).begin());
      if (n < n_int) {
        auto dsrc = b.increments.row(n * b.paths + start + k);
        std::copy(dsrc.begin(), dsrc.end(), out.increments.row(n * count + k).begin());
      }
    }
  }
  return out;
}

// How Z enters the recorded loss for one step.
struct ZInput {
  double value = 0.0;       // numeric Z^l after the moving-average update
  bool on_tape = false;     // rebuild Z from the recorded batch estimate
  bool as_leaf = false;     // record Z as a differentiable leaf (sharded z_gradient)
  bool first = false;       // Z^l = Zhat^l
  double previous = 0.0;    // Z^{l-1}
  double gamma = 0.0;
};

struct ShardOutput {
  LossTerms terms;
  std::vector<std::vector<double>> grads;  // parameter_blocks order
  std::size_t clipped = 0;
  double z_adjoint = 0.0;  // d loss / d Z when Z is a leaf
  Var psi0;                // N_psi(X_0) of the shard, still on the shard tape
  BoundNetwork net;
};

// Records and differentiates the loss of one shard on `tape`.
inline ShardOutput run_shard(Tape& tape, const NetworkParams& params, const ProblemSpec& problem,
                             const TrainConfig& cfg, PathBatch shard, std::size_t total_paths,
                             const ZInput& zin, bool lambda_trainable, bool with_hinge,
                             bool want_grads = true) {
  tape.clear();
  BoundNetwork net = bind(params, tape, true);
  if (!lambda_trainable) net.lambda = tape.constant(params.lambda);
  const std::size_t kp = shard.paths;
  Var x0 = tape.constant(shard.state(0));
  Var psi0 = eval_psi(net, x0);
  Var z = zin.as_leaf ? tape.leaf(Tensor::scalar(zin.value), true) : tape.constant(zin.value);
  if (zin.on_tape) {
    Var zhat = batch_estimate(psi0);
    z = zin.first ? zhat : add_const(scale(zhat, 1.0 - zin.gamma), zin.gamma * zin.previous);
  }
  Var grads_all = eval_grad_head(net, tape.constant(shard.states));
  PropagationInputs in{psi0, grads_all, net.lambda, z};
  if (problem.semilinear()) {
    propagate_semilinear(shard, problem, in, cfg.clip);
  } else {
    propagate_linear(shard, problem, in);
  }
  Var g_t = slice_rows(grads_all, shard.intervals() * kp, kp);
  ShardOutput out;
  out.terms = loss(shard, net, z, problem, cfg, g_t, total_paths, with_hinge);
  out.clipped = shard.clipped;
  if (want_grads) {
    tape.backward(out.terms.total);
    for (Var v : net.tensor_vars()) {
      auto g = tape.grad(v);
      out.grads.emplace_back(g.values().begin(), g.values().end());
    }
    out.grads.push_back({lambda_trainable ? tape.grad(net.lambda)[0] : 0.0});
    if (zin.as_leaf) out.z_adjoint = tape.grad(z)[0];
  }
  out.psi0 = psi0;
  out.net = net;
  return out;
}

}  // namespace detail

/// Single evaluation of the loss and its gradient for given parameters and Z,
/// on the batch of training step `step`. Used by tests and the step-0 record.
struct StepEvaluation {
  LossTerms terms;
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
  std::size_t clipped = 0;
};

inline PathBatch training_batch(const ProblemSpec& problem, const TrainConfig& cfg,
                                std::size_t step) {
  Tensor x0 = sample_initial(cfg.batch, problem.dim, cfg.seed, step);
  return simulate_forward(x0, TimeGrid::uniform(cfg.horizon, cfg.intervals), problem.sigma,
                          cfg.seed, step);
}

inline StepEvaluation evaluate_step(const NetworkParams& params, const ProblemSpec& problem,
                                    const TrainConfig& cfg, const PathBatch& batch, double z,
                                    bool lambda_trainable = true) {
  Tape tape;
  detail::ZInput zin;
  zin.value = z;
  auto out = detail::run_shard(tape, params, problem, cfg, batch, batch.paths, zin,
                               lambda_trainable, true);
  StepEvaluation e;
  e.terms = out.terms;
  e.loss = out.terms.total.item();
  e.grads = std::move(out.grads);
  e.clipped = out.clipped;
  return e;
}

class Trainer {
 public:
  Trainer(const ProblemSpec& problem, TrainConfig cfg)
      : problem_(problem), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (problem_.sigma.rows() != problem_.dim) throw ShapeError("problem sigma is not d x d");
    tapes_.resize(cfg_.workers);
    if (cfg_.reference_index < problem_.eigenpairs.size()) {
      reference_ = &problem_.eigenpairs[cfg_.reference_index];
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const KnownEigenpair* reference() const { return reference_; }

  /// Runs until state.step == cfg.iterations. A fresh state records step 0 first.
  TrainResult run(TrainState state, const TrainCallbacks& cb = {}) {
    state.params.validate();
    state.norm.gamma = cfg_.gamma;
    state.norm.z0 = cfg_.z0;
    state.norm.eta3 = cfg_.eta3;
    TrainResult result;
    if (state.step == 0 && state.history.empty()) {
      emit(record_initial(state), state, cb);
    }
    while (state.step < cfg_.iterations) {
      const std::size_t step = state.step + 1;
      auto [loss_value, clipped] = optimize(state, step);
      result.clipped += clipped;
      state.step = step;
      if (step % cfg_.record_every == 0 || step == cfg_.iterations) {
        emit(make_record(state, step, loss_value), state, cb);
      }
      if (cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0 && cb.on_checkpoint) {
        cb.on_checkpoint(state);
      }
    }
    result.summary = summarize(state.history, cfg_.final_window);
    if (reference_) result.summary.reference_lambda = reference_->lambda;
    result.state = std::move(state);
    return result;
  }

  /// Points used for the validation record at `step`.
  Tensor validation_points(std::size_t step) const {
    const std::size_t n = cfg_.validation_size ? cfg_.validation_size : cfg_.batch;
    return sample_initial(n, problem_.dim, cfg_.seed, step, StreamTag::Validation);
  }

 private:
  bool lambda_trainable(std::size_t step) const { return step > cfg_.lambda_freeze_steps; }

  std::pair<double, std::size_t> optimize(TrainState& state, std::size_t step) {
    PathBatch batch = training_batch(problem_, cfg_, step);

    // Normalization constant for this step from the batch estimate at X_0.
    Tensor psi0 = eval_psi(state.params, batch.state(0));
    const double zhat = batch_estimate(psi0.values());
    if (!std::isfinite(zhat)) {
      throw NumericalError("non-finite normalization estimate at training step " +
                               std::to_string(step),
                           0);
    }
    detail::ZInput zin;
    zin.first = !state.norm.initialized;
    zin.previous = state.norm.z;
    NormUpdate nu = update_moving_average(state.norm, zhat, step);
    zin.value = nu.z;
    zin.gamma = nu.gamma;
    const bool z_grad = cfg_.z_gradient && !nu.degenerate;
    zin.on_tape = z_grad && cfg_.workers == 1;
    zin.as_leaf = z_grad && cfg_.workers > 1;

    const bool train_lambda = lambda_trainable(step);
    std::vector<detail::ShardOutput> outs(cfg_.workers);
    const std::size_t base = cfg_.batch / cfg_.workers, extra = cfg_.batch % cfg_.workers;
    auto work = [&](std::size_t s) {
      const std::size_t start = s * base + std::min(s, extra);
      const std::size_t count = base + (s < extra ? 1 : 0);
      if (count == 0) return;
      outs[s] = detail::run_shard(tapes_[s], state.params, problem_, cfg_,
                                  detail::slice_paths(batch, start, count), cfg_.batch, zin,
                                  train_lambda, s == 0);
    };
    if (cfg_.workers == 1) {
      outs[0] = detail::run_shard(tapes_[0], state.params, problem_, cfg_, std::move(batch),
                                  cfg_.batch, zin, train_lambda, true);
    } else {
      std::vector<std::exception_ptr> errors(cfg_.workers);
      {
        std::vector<std::jthread> pool;
        for (std::size_t s = 0; s < cfg_.workers; ++s) {
          pool.emplace_back([&, s] {
            try {
              work(s);
            } catch (...) {
              errors[s] = std::current_exception();
            }
          });
        }
      }
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }

    if (zin.as_leaf) add_normalizer_path(outs, zhat, zin);

    // Ordered merge of shard gradients.
    std::vector<std::vector<double>> grads;
    double loss_value = 0.0;
    std::size_t clipped = 0;
    for (auto& o : outs) {
      if (o.grads.empty()) continue;
      loss_value += o.terms.total.item();
      clipped += o.clipped;
      if (grads.empty()) {
        grads = std::move(o.grads);
      } else {
        for (std::size_t b = 0; b < grads.size(); ++b) {
          for (std::size_t i = 0; i < grads[b].size(); ++i) grads[b][i] += o.grads[b][i];
        }
      }
    }
    // A zero batch estimate adds the hinge at Z = 0 and skips the Z update.
    if (nu.degenerate) loss_value += hinge_penalty(0.0, cfg_.z0, cfg_.eta3);

    if (cfg_.grad_clip_norm > 0.0) clip_global_norm(grads, cfg_.grad_clip_norm);
    auto blocks = parameter_blocks(state.params);
    std::vector<bool> active(blocks.size(), true);
    active.back() = train_lambda;
    adam_step(blocks, grads, state.adam, cfg_.learning_rate.at(step), cfg_.adam, active);
    if (!std::isfinite(state.params.lambda)) {
      throw NumericalError("lambda became non-finite at training step " + std::to_string(step),
                           cfg_.intervals);
    }
    return {loss_value, clipped};
  }

  // Sharded z_gradient: Z^l = gamma Z^{l-1} + (1 - gamma) Zhat^l couples all shards, with
  // dZhat/dpsi_k = psi_k / (K Zhat). The summed dL/dZ is pushed back through each shard's
  // psi head in a second sweep.
  void add_normalizer_path(std::vector<detail::ShardOutput>& outs, double zhat,
                           const detail::ZInput& zin) {
    double gz = 0.0;
    for (const auto& o : outs) gz += o.z_adjoint;
    const double dz = zin.first ? 1.0 : 1.0 - zin.gamma;
    const double c = gz * dz / (static_cast<double>(cfg_.batch) * zhat);
    for (std::size_t s = 0; s < outs.size(); ++s) {
      auto& o = outs[s];
      if (o.grads.empty()) continue;
      Tape& tape = tapes_[s];
      Tensor w = o.psi0.value();
      for (double& v : w.values()) v *= c;
      tape.backward(sum(mul(o.psi0, tape.constant(w))));
      auto vars = o.net.tensor_vars();
      for (std::size_t i = 0; i < vars.size(); ++i) {
        Tensor g = tape.grad(vars[i]);
        for (std::size_t k = 0; k < g.size(); ++k) o.grads[i][k] += g[k];
      }
    }
  }

  TrainRecord make_record(const TrainState& state, std::size_t step, double loss_value) const {
    TrainRecord r;
    r.step = step;
    r.loss = loss_value;
    r.lambda = state.params.lambda;
    r.z = state.norm.z;
    fill_errors(r, state.params, r.z, step);
    return r;
  }

  // Step 0: loss of the first batch with Z from its own batch estimate; nothing is updated.
  TrainRecord record_initial(const TrainState& state) const {
    PathBatch batch = training_batch(problem_, cfg_, 0);
    Tensor psi0 = eval_psi(state.params, batch.state(0));
    double z = state.norm.initialized ? state.norm.z : batch_estimate(psi0.values());
    if (z == 0.0) z = cfg_.z0;
    TrainRecord r;
    r.step = 0;
    r.loss = evaluate_step(state.params, problem_, cfg_, batch, z, false).loss;
    r.lambda = state.params.lambda;
    r.z = z;
    fill_errors(r, state.params, z, 0);
    return r;
  }

  void fill_errors(TrainRecord& r, const NetworkParams& params, double z, std::size_t step) const {
    if (!reference_) return;
    auto m = validate_against(params, z, problem_, *reference_, validation_points(step));
    r.has_reference = true;
    r.err_lambda = m.err_lambda;
    r.err_psi_l2 = m.err_psi_l2;
    r.err_psi_inf = m.err_psi_inf;
    r.err_grad = m.err_grad;
  }

  void emit(TrainRecord r, TrainState& state, const TrainCallbacks& cb) const {
    state.history.push_back(r);
    if (cb.on_record) cb.on_record(r);
  }

  const ProblemSpec& problem_;
  TrainConfig cfg_;
  std::vector<Tape> tapes_;
  const KnownEigenpair* reference_ = nullptr;
};

/// Full training run from a fresh initialization.
inline TrainResult train(const ProblemSpec& problem, const TrainConfig& cfg,
                         const TrainCallbacks& cb = {}) {
  Trainer t(problem, cfg);
  return t.run(initial_state(problem, cfg), cb);
}

// ---------------------------------------------------------------- supervised init

/// Fits N_psi to Z0 * psi_init / rms(psi_init) and the gradient head to
/// sigma^T grad psi_init / rms(psi_init) by mean-squared regression with Adam.
/// Returns the final regression loss.
inline double supervised_fit(NetworkParams& params, const ProblemSpec& problem,
                             const SupervisedInit& target, double z0, std::uint64_t seed,
                             const AdamConfig& adam_cfg = {}) {
  if (!target.psi || !target.grad) throw std::invalid_argument("supervised init needs targets");
  if (target.batch < 1) throw std::invalid_argument("supervised batch must be >= 1");
  const std::size_t d = problem.dim;

  // RMS of psi_init over the domain from a large fixed sample.
  Tensor probe = sample_initial(8192, d, seed, 0, StreamTag::Supervised);
  double rms = 0.0;
  for (std::size_t k = 0; k < probe.rows(); ++k) {
    double v = target.psi(probe.row(k));
    rms += v * v;
  }
  rms = std::sqrt(rms / static_cast<double>(probe.rows()));
  if (!(rms > 0.0)) throw std::invalid_argument("supervised target has zero RMS");

  auto blocks = parameter_blocks(params);
  AdamState adam = make_adam_state(blocks);
  std::vector<bool> active(blocks.size(), true);
  active.back() = false;
  Tape tape;
  double last = 0.0;
  std::vector<double> raw(d), scaled(d);
  for (std::size_t step = 1; step <= target.steps; ++step) {
    Tensor x = sample_initial(target.batch, d, seed, step, StreamTag::Supervised);
    Tensor psi_t(target.batch, 1), grad_t(target.batch, d);
    for (std::size_t k = 0; k < target.batch; ++k) {
      auto xk = x.row(k);
      psi_t(k, 0) = z0 * target.psi(xk) / rms;
      target.grad(xk, raw);
      problem.scale_gradient(raw, scaled);
      for (std::size_t i = 0; i < d; ++i) grad_t(k, i) = scaled[i] / rms;
    }
    tape.clear();
    BoundNetwork net = bind(params, tape, true);
    Var xv = tape.constant(x);
    const double inv_k = 1.0 / static_cast<double>(target.batch);
    Var l1 = scale(sum(square(sub(eval_psi(net, xv), tape.constant(psi_t)))), inv_k / (z0 * z0));
    Var l2 = scale(sum(square(sub(eval_grad_head(net, xv), tape.constant(grad_t)))), inv_k);
    Var total = add(l1, l2);
    last = total.item();
    tape.backward(total);
    std::vector<std::vector<double>> grads;
    for (Var v : net.tensor_vars()) {
      auto g = tape.grad(v);
      grads.emplace_back(g.values().begin(), g.values().end());
    }
    grads.push_back({0.0});
    adam_step(blocks, grads, adam, target.learning_rate, adam_cfg, active);
  }
  return last;
}

/// Second-eigenpair protocol: optional supervised initialization, then training
/// with lambda fixed at lambda_bar for cfg.lambda_freeze_steps, then joint training.
inline TrainResult train_second_eigenpair(const ProblemSpec& problem, TrainConfig cfg,
                                          double lambda_bar,
                                          const std::optional<SupervisedInit>& init = {},
                                          const TrainCallbacks& cb = {}) {
  if (cfg.lambda_freeze_steps == 0) {
    throw std::invalid_argument("second-eigenpair training needs lambda_freeze_steps > 0");
  }
  cfg.lambda_init = lambda_bar;
  TrainState state = initial_state(problem, cfg);
  if (init) supervised_fit(state.params, problem, *init, cfg.z0, cfg.seed, cfg.adam);
  Trainer t(problem, cfg);
  return t.run(std::move(state), cb);
}

}  // namespace fkeig
