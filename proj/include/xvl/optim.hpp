#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "xvl/error.hpp"
#include "xvl/params.hpp"

namespace xvl {

enum class OptimizerKind { PlainDescent, AdamW };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd" || s == "plain" || s == "plain-descent") return OptimizerKind::PlainDescent;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::PlainDescent;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Stateful first-order update rule applied to a whole ParamSet.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }

    void step(ParamSet& params, const ParamSet& grads) {
        if (!params.same_layout(grads)) throw ShapeError("optimizer: gradient layout differs from parameters");
        if (config_.kind == OptimizerKind::PlainDescent) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor p = params.entry(i).value;
                const Tensor& g = grads.entry(i).value;
                for (std::size_t j = 0; j < p.size(); ++j) p[j] -= config_.lr * g[j];
                params.set(i, std::move(p));
            }
            return;
        }
        if (!m_) {
            m_ = std::make_unique<ParamSet>(params.zeros_like());
            v_ = std::make_unique<ParamSet>(params.zeros_like());
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor p = params.entry(i).value;
            Tensor m = m_->entry(i).value;
            Tensor v = v_->entry(i).value;
            const Tensor& g = grads.entry(i).value;
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
                v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
                // Decoupled weight decay, then the bias-corrected moment step.
                p[j] *= 1.0 - config_.lr * config_.weight_decay;
                p[j] -= config_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
            }
            params.set(i, std::move(p));
            m_->set(i, std::move(m));
            v_->set(i, std::move(v));
        }
    }

private:
    OptimizerConfig config_;
    std::unique_ptr<ParamSet> m_;
    std::unique_ptr<ParamSet> v_;
    long t_ = 0;
};

} // namespace xvl
