#pragma once

// Vanilla and sharpness-aware gradient descent, epoch training with early stopping, and a
// random-direction sharpness probe.

#include "stabforge/autodiff.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"
#include "stabforge/seq2seq.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace stabforge {

enum class TrainMode { vanilla, sam };

inline TrainMode parse_train_mode(std::string_view s) {
    if (s == "vanilla") return TrainMode::vanilla;
    if (s == "sam") return TrainMode::sam;
    throw ConfigError("unknown training mode '" + std::string(s) + "'");
}

inline std::string to_string(TrainMode m) { return m == TrainMode::sam ? "sam" : "vanilla"; }

struct TrainConfig {
    TrainMode mode = TrainMode::sam;
    double rho = 0.02;
    double lr = 0.1;
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    std::size_t patience = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (mode == TrainMode::sam && !(rho > 0.0)) throw ConfigError("train: rho must be positive in sam mode");
        if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
        if (epochs == 0 || batch_size == 0) throw ConfigError("train: epochs and batch size must be positive");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t stopping_epoch = 0;
    std::size_t best_epoch = 0;
    double best_valid_loss = std::numeric_limits<double>::infinity();
    std::size_t zero_norm_fallbacks = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "epoch,train_loss,valid_loss,seconds\n";
        for (const auto& e : epochs) os << e.epoch << ',' << e.train_loss << ',' << e.valid_loss << ',' << e.seconds << '\n';
        return os.str();
    }

    /// Summary without wall times, so that it is reproducible across runs.
    nlohmann::json summary() const {
        std::vector<double> train, valid;
        for (const auto& e : epochs) {
            train.push_back(e.train_loss);
            valid.push_back(e.valid_loss);
        }
        return {{"train_loss", train},           {"valid_loss", valid},
                {"stopping_epoch", stopping_epoch}, {"best_epoch", best_epoch},
                {"best_valid_loss", best_valid_loss}, {"zero_norm_fallbacks", zero_norm_fallbacks}};
    }
};

/// Anything trainable: exposes its parameter tensors and a scalar batch loss.
template <class M>
concept TrainableModel = requires(M& m, const M& cm, std::span<const Example> batch, Rng* rng) {
    { m.parameters() } -> std::convertible_to<std::vector<ad::Tensor*>>;
    { cm.loss(batch, rng) } -> std::convertible_to<ad::Tensor>;
};

using LossFn = std::function<ad::Tensor()>;

inline void zero_grads(std::span<ad::Tensor* const> params) {
    for (auto* p : params) p->zero_grad();
}

/// Joint L2 norm of the gradients of all parameters.
inline double global_grad_norm(std::span<ad::Tensor* const> params) {
    double sq = 0.0;
    for (auto* p : params)
        for (double g : p->grad()) sq += g * g;
    return std::sqrt(sq);
}

struct StepInfo {
    double loss = 0.0;       // loss at the pre-step parameters
    double grad_norm = 0.0;  // joint norm of the first gradient
    bool perturbed = false;  // false when the sharpness-aware perturbation was skipped
};

/// theta <- theta - lr * grad L(theta).
inline StepInfo vanilla_step(std::span<ad::Tensor* const> params, const LossFn& loss_fn, double lr) {
    zero_grads(params);
    auto loss = loss_fn();
    loss.backward();
    StepInfo info{loss.item(), global_grad_norm(params), false};
    for (auto* p : params) {
        auto v = p->mutable_values();
        auto g = p->grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
    return info;
}

/// One sharpness-aware step: perturb along the normalized gradient by `rho`, take the gradient
/// there, restore the parameters, and descend with that gradient. A zero gradient norm or zero
/// radius degrades to a vanilla step. `loss_fn` must be deterministic (same dropout masks) on
/// both calls.
inline StepInfo sam_step(std::span<ad::Tensor* const> params, const LossFn& loss_fn, double rho, double lr) {
    zero_grads(params);
    auto loss = loss_fn();
    loss.backward();
    StepInfo info{loss.item(), global_grad_norm(params), true};
    if (info.grad_norm == 0.0 || rho == 0.0) {
        info.perturbed = false;
        for (auto* p : params) {
            auto v = p->mutable_values();
            auto g = p->grad();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        }
        return info;
    }
    std::vector<std::vector<double>> saved;
    saved.reserve(params.size());
    const double s = rho / info.grad_norm;
    for (auto* p : params) {
        auto v = p->mutable_values();
        saved.emplace_back(v.begin(), v.end());
        auto g = p->grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * g[i];
    }
    zero_grads(params);
    loss_fn().backward();
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto v = params[k]->mutable_values();
        auto g = params[k]->grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = saved[k][i] - lr * g[i];
    }
    return info;
}

namespace detail {

inline std::vector<std::vector<double>> snapshot(std::span<ad::Tensor* const> params) {
    std::vector<std::vector<double>> out;
    for (auto* p : params) out.emplace_back(p->values().begin(), p->values().end());
    return out;
}

inline void restore(std::span<ad::Tensor* const> params, const std::vector<std::vector<double>>& snap) {
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(snap[k].begin(), snap[k].end(), params[k]->mutable_values().begin());
}

inline std::size_t target_count(std::span<const Example> batch) {
    std::size_t n = 0;
    for (const auto& e : batch) n += e.tgt.size() + 1;
    return n;
}

} // namespace detail

/// Token-weighted mean loss over `data`, evaluated in chunks without dropout.
template <TrainableModel M>
double evaluate_loss(const M& model, std::span<const Example> data, std::size_t chunk = 64) {
    if (data.empty()) throw ConfigError("evaluate_loss: empty dataset");
    ad::NoGradGuard guard;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); i += chunk) {
        auto part = data.subspan(i, std::min(chunk, data.size() - i));
        const std::size_t n = detail::target_count(part);
        total += model.loss(part, nullptr).item() * double(n);
        count += n;
    }
    return total / double(count);
}

/// Trains with shuffled mini-batches. After each epoch the validation loss is measured; training
/// stops once it has not improved for `patience` epochs (0 disables early stopping), and the
/// parameters of the best epoch are restored.
template <TrainableModel M>
TrainHistory train(M& model, std::span<const Example> train_set, std::span<const Example> valid_set, const TrainConfig& config,
                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    config.validate();
    if (train_set.empty()) throw ConfigError("train: empty training set");
    if (valid_set.empty()) throw ConfigError("train: empty validation set");
    auto params = model.parameters();
    for (auto* p : params) p->set_requires_grad(true);
    Rng rng(derive_seed(config.seed, "train"));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    TrainHistory history;
    auto best = detail::snapshot(params);
    std::size_t since_best = 0;
    std::vector<Example> batch;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            batch.clear();
            for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i) batch.push_back(train_set[order[i]]);
            const Rng dropout_state(rng());
            LossFn fn = [&] {
                Rng r = dropout_state;
                return model.loss(batch, &r);
            };
            const auto info = config.mode == TrainMode::sam ? sam_step(params, fn, config.rho, config.lr)
                                                            : vanilla_step(params, fn, config.lr);
            if (!std::isfinite(info.loss)) throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch));
            if (config.mode == TrainMode::sam && !info.perturbed) ++history.zero_norm_fallbacks;
            const std::size_t n = detail::target_count(batch);
            loss_sum += info.loss * double(n);
            loss_count += n;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(loss_count);
        rec.valid_loss = evaluate_loss(model, valid_set);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        history.epochs.push_back(rec);
        history.stopping_epoch = epoch;
        if (on_epoch) on_epoch(rec);
        if (rec.valid_loss < history.best_valid_loss) {
            history.best_valid_loss = rec.valid_loss;
            history.best_epoch = epoch;
            best = detail::snapshot(params);
            since_best = 0;
        } else if (config.patience > 0 && ++since_best >= config.patience) {
            break;
        }
    }
    detail::restore(params, best);
    zero_grads(params);
    return history;
}

/// Mean loss increase (1/n) sum_i [L(theta + rho u_i) - L(theta)] over random unit directions
/// u_i drawn from an isotropic Gaussian over all parameters jointly.
inline double sharpness_probe(std::span<ad::Tensor* const> params, const std::function<double()>& loss_value, double rho,
                              std::size_t n_directions, std::uint64_t seed) {
    if (n_directions == 0) throw ConfigError("sharpness_probe: need at least one direction");
    const double base = loss_value();
    const auto saved = detail::snapshot(params);
    Rng rng(derive_seed(seed, "sharpness-probe"));
    double total = 0.0;
    for (std::size_t k = 0; k < n_directions; ++k) {
        std::vector<std::vector<double>> u;
        double sq = 0.0;
        for (auto* p : params) {
            std::vector<double> d(p->size());
            for (auto& x : d) {
                x = standard_normal(rng);
                sq += x * x;
            }
            u.push_back(std::move(d));
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto v = params[i]->mutable_values();
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = saved[i][j] + rho * inv * u[i][j];
        }
        total += loss_value() - base;
        detail::restore(params, saved);
    }
    return total / double(n_directions);
}

template <TrainableModel M>
double sharpness_probe(M& model, std::span<const Example> batch, double rho, std::size_t n_directions, std::uint64_t seed) {
    auto params = model.parameters();
    return sharpness_probe(params, [&] { return evaluate_loss(model, batch); }, rho, n_directions, seed);
}

} // namespace stabforge
