#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltmp/checkpoint.hpp"
#include "ltmp/dataset.hpp"
#include "ltmp/flops.hpp"
#include "ltmp/model.hpp"

namespace ltmp {

/// Receives one JSON record per logged event.
using EventLog = std::function<void(const nlohmann::json&)>;

struct PretrainConfig {
    std::size_t epochs = 4;
    std::size_t batch_size = 32;
    double lr = 1e-3;          // Adam, constant
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t log_every = 20;   // steps
};

struct FinetuneConfig {
    double r_target = 0.7;
    double lambda = 10.0;
    double tau = kDefaultTau;
    // Sized for the toy backbone, whose similarity and importance scores sit in
    // a much narrower band than those of a full-size ViT; the ratio is kept at 1000.
    double lr_prune = 1e-7;
    double lr_merge = 1e-4;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(r_target > 0.0 && r_target <= 1.0)) {
            throw std::invalid_argument("r_target must lie in (0, 1], got " + std::to_string(r_target));
        }
        if (!(lr_prune > 0.0) || !(lr_merge > 0.0)) throw std::invalid_argument("learning rates must be positive");
        if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
        if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
        if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    }
};

/// Thrown when the loss or a kernel output stops being finite.
class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

namespace detail {

/// Visiting order of a shuffled epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed, 1000 + epoch);
    rng.shuffle(std::span<std::size_t>(idx));
    return idx;
}

inline void add_into(VitParams<double>& acc, const std::vector<Tensor<double>>& grads) {
    std::size_t i = 0;
    acc.visit([&](std::string_view, Tensor<double>& t) { t += grads[i++]; });
}

}  // namespace detail

/// Adam state over every backbone tensor.
class Adam {
public:
    Adam(const VitParams<double>& shape_of, const PretrainConfig& cfg) : cfg_(cfg) {
        shape_of.visit([&](std::string_view, const Tensor<double>& t) {
            m_.emplace_back(t.shape());
            v_.emplace_back(t.shape());
        });
    }

    void step(VitParams<double>& params, const VitParams<double>& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::vector<const Tensor<double>*> gs;
        grads.visit([&](std::string_view, const Tensor<double>& g) { gs.push_back(&g); });
        std::size_t k = 0;
        params.visit([&](std::string_view, Tensor<double>& p) {
            const auto& g = *gs[k];
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
            }
            ++k;
        });
    }

private:
    PretrainConfig cfg_;
    std::vector<Tensor<double>> m_, v_;
    std::uint64_t t_ = 0;
};

struct EvalMetrics {
    std::size_t samples = 0;
    double top1 = 0;                          // percent
    double mean_r_flops = 1;
    std::vector<double> mean_tokens;          // kept tokens after each block's reduction, CLS included
    std::vector<std::size_t> predictions;
};

inline nlohmann::json to_json(const EvalMetrics& m) {
    return {{"samples", m.samples}, {"top1", m.top1}, {"mean_r_flops", m.mean_r_flops}, {"mean_tokens", m.mean_tokens}};
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// Top-1 accuracy, per-sample r_FLOPs and tokens per layer over a dataset.
inline EvalMetrics evaluate(const Checkpoint& ck, const Dataset& ds, ExecMode mode) {
    if (ds.empty()) throw std::invalid_argument("evaluate: empty dataset");
    check_dataset_matches(ds, ck.config);
    EvalMetrics out;
    out.samples = ds.size();
    out.mean_tokens.assign(ck.config.blocks, 0.0);
    std::size_t correct = 0;
    double r_sum = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Graph<double> g(false);
        BoundModel m = bind(g, ck.params, ck.thresholds, false, false);
        auto r = model_forward(g, ds.image(i), ck.config, m, ForwardOptions{mode, false});
        const std::size_t pred = argmax(g.value(r.logits).data());
        out.predictions.push_back(pred);
        if (pred == ds.labels[i]) ++correct;
        r_sum += g.value(r.r_flops).item();
        for (std::size_t l = 0; l < ck.config.blocks; ++l) out.mean_tokens[l] += static_cast<double>(r.trace.layers[l].kept);
    }
    const double n = static_cast<double>(ds.size());
    out.top1 = 100.0 * static_cast<double>(correct) / n;
    out.mean_r_flops = r_sum / n;
    for (auto& t : out.mean_tokens) t /= n;
    return out;
}

/// Trains every backbone parameter with cross-entropy and no token reduction.
/// Thresholds in the returned checkpoint are reset to their no-op values.
inline Checkpoint pretrain_backbone(Checkpoint ck, const Dataset& train, const Dataset* val, const PretrainConfig& pc,
                                    const EventLog& log = {}) {
    if (pc.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be >= 1");
    if (!(pc.lr > 0.0)) throw std::invalid_argument("pretrain: lr must be positive");
    ModelConfig run_cfg = ck.config;
    run_cfg.reduction_order = ReductionOrder::none;
    ck.thresholds = ThresholdSet::initial(ck.config.blocks, ck.thresholds.tau);
    if (pc.epochs == 0) return ck;
    if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
    check_dataset_matches(train, run_cfg);

    Adam opt(ck.params, pc);
    std::uint64_t step = 0;
    double last_loss = 0;
    for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
        const auto order = detail::epoch_order(train.size(), pc.seed, epoch);
        for (std::size_t start = 0; start < order.size(); start += pc.batch_size) {
            const std::size_t end = std::min(order.size(), start + pc.batch_size);
            auto acc = zero_params<double>(run_cfg);
            double loss_sum = 0;
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                Graph<double> g;
                BoundModel m = bind(g, ck.params, ck.thresholds, true, false);
                double loss_value = 0;
                try {
                    auto r = model_forward(g, train.image(i), run_cfg, m, ForwardOptions{});
                    Var loss = ad::cross_entropy(g, r.logits, train.labels[i]);
                    loss_value = g.value(loss).item();
                    const auto vars = parameter_vars(m.params);
                    detail::add_into(acc, g.gradients(loss, vars));
                } catch (const NumericError& e) {
                    throw DivergenceError("pretrain diverged at step " + std::to_string(step) + ", sample " +
                                          std::to_string(i) + ": " + e.what());
                }
                loss_sum += loss_value;
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            acc.visit([&](std::string_view, Tensor<double>& t) {
                for (auto& v : t.values()) v *= scale;
            });
            opt.step(ck.params, acc);
            last_loss = loss_sum * scale;
            if (!std::isfinite(last_loss)) {
                throw DivergenceError("pretrain diverged at step " + std::to_string(step) + ": loss is not finite");
            }
            if (log && (step % pc.log_every == 0)) {
                log({{"event", "pretrain_step"}, {"epoch", epoch}, {"step", step}, {"loss", last_loss}});
            }
            ++step;
        }
    }
    nlohmann::json metrics = {{"phase", "pretrain"}, {"steps", step}, {"final_loss", last_loss}};
    if (val && !val->empty()) {
        Checkpoint probe{run_cfg, ck.params, ck.thresholds, {}};
        metrics["val_top1"] = evaluate(probe, *val, ExecMode::inference).top1;
    }
    if (log) log({{"event", "pretrain_done"}, {"metrics", metrics}});
    ck.meta = CheckpointMeta{pc.seed, step, metrics.dump()};
    return ck;
}

struct FinetuneStep {
    std::size_t step = 0;
    double loss = 0;      // batch mean of CE + lambda * reg
    double ce = 0;
    double reg = 0;       // batch mean of per-sample (r_target - r)^2
    double r_flops = 1;   // batch mean
    std::vector<double> theta_merge;
    std::vector<double> theta_prune;
};

inline nlohmann::json to_json(const FinetuneStep& s) {
    return {{"step", s.step}, {"loss", s.loss}, {"ce", s.ce}, {"reg", s.reg}, {"r_flops", s.r_flops},
            {"theta_merge", s.theta_merge}, {"theta_prune", s.theta_prune}};
}

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<FinetuneStep> trajectory;
};

/// One epoch of plain SGD on the 2L thresholds; every backbone tensor is frozen.
/// The checkpoint's reduction order must be one of the threshold modes.
inline FinetuneResult ltmp_finetune(Checkpoint ck, const Dataset& train, const FinetuneConfig& fc,
                                    const EventLog& log = {}) {
    fc.validate();
    const ModelConfig& cfg = ck.config;
    if (cfg.reduction_order == ReductionOrder::none || is_topk(cfg.reduction_order)) {
        throw std::invalid_argument("ltmp fine-tuning needs a threshold reduction order, got " +
                                    std::string(to_string(cfg.reduction_order)));
    }
    if (train.empty()) throw std::invalid_argument("ltmp: empty training set");
    check_dataset_matches(train, cfg);
    ck.thresholds.tau = fc.tau;
    ck.thresholds.validate();

    FinetuneResult out;
    const std::size_t layers = cfg.blocks;
    const auto order = detail::epoch_order(train.size(), fc.seed, 0);
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += fc.batch_size, ++step) {
        const std::size_t end = std::min(order.size(), start + fc.batch_size);
        std::vector<double> g_merge(layers, 0.0), g_prune(layers, 0.0);
        FinetuneStep rec;
        rec.step = step;
        rec.r_flops = 0;
        for (std::size_t b = start; b < end; ++b) {
            const std::size_t i = order[b];
            Graph<double> g;
            BoundModel m = bind(g, ck.params, ck.thresholds, false, true);
            try {
                auto r = model_forward(g, train.image(i), cfg, m, ForwardOptions{});
                Var ce = ad::cross_entropy(g, r.logits, train.labels[i]);
                Var gap = ad::add_scalar(g, r.r_flops, -fc.r_target);
                Var reg = ad::square(g, gap);
                Var loss = ad::add(g, ce, ad::scale(g, reg, fc.lambda));
                g.backward(loss);
                for (std::size_t l = 0; l < layers; ++l) {
                    g_merge[l] += g.grad(m.theta_merge[l]).item();
                    g_prune[l] += g.grad(m.theta_prune[l]).item();
                }
                rec.ce += g.value(ce).item();
                rec.reg += g.value(reg).item();
                rec.loss += g.value(loss).item();
                rec.r_flops += g.value(r.r_flops).item();
            } catch (const NumericError& e) {
                throw DivergenceError("ltmp fine-tuning diverged at step " + std::to_string(step) + ", sample " +
                                      std::to_string(i) + ": " + e.what());
            }
        }
        const double scale = 1.0 / static_cast<double>(end - start);
        for (std::size_t l = 0; l < layers; ++l) {
            ck.thresholds.merge[l] -= fc.lr_merge * g_merge[l] * scale;
            ck.thresholds.prune[l] -= fc.lr_prune * g_prune[l] * scale;
        }
        rec.ce *= scale;
        rec.reg *= scale;
        rec.loss *= scale;
        rec.r_flops *= scale;
        rec.theta_merge = ck.thresholds.merge;
        rec.theta_prune = ck.thresholds.prune;
        if (!std::isfinite(rec.loss)) throw DivergenceError("ltmp fine-tuning diverged at step " + std::to_string(step));
        if (log) {
            auto j = to_json(rec);
            j["event"] = "ltmp_step";
            log(j);
        }
        out.trajectory.push_back(std::move(rec));
    }
    nlohmann::json metrics = {{"phase", "ltmp"},
                              {"steps", step},
                              {"r_target", fc.r_target},
                              {"final_batch_r_flops", out.trajectory.empty() ? 1.0 : out.trajectory.back().r_flops}};
    ck.meta = CheckpointMeta{fc.seed, step, metrics.dump()};
    out.checkpoint = std::move(ck);
    return out;
}

}  // namespace ltmp
