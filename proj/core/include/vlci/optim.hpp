#pragma once

#include "vlci/nn.hpp"

#include <cmath>

namespace vlci::opt {

// lr(step) for step in [0, total): linear warmup to peak at
// warmup_fraction * total, then cosine decay to 0 at the final step.
inline double lr_at(long step, long total_steps, double peak, double warmup_fraction) {
    if (total_steps <= 0) return peak;
    const double warm = warmup_fraction * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warm > 0.0 && s < warm) return peak * s / warm;
    const double denom = static_cast<double>(total_steps) - warm;
    if (denom <= 0.0) return peak;
    const double progress = (s - warm) / denom;  // 0 at peak, 1 at final step
    return peak * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

enum class OptimizerKind { AdamW, Adam };

struct AdamConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    const AdamConfig& config() const { return cfg_; }

    // One update from the accumulated gradients in ps at learning rate lr.
    void step(nn::ParamStore<T>& ps, double lr) {
        ++t_;
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (auto& e : ps.entries()) {
                if (e.grad.size() == 0) continue;
                sq += static_cast<double>(e.grad.template cast<double>().squaredNorm());
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) {
                const T s = static_cast<T>(cfg_.clip_norm / norm);
                for (auto& e : ps.entries())
                    if (e.grad.size() != 0) e.grad *= s;
            }
        }
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& e : ps.entries()) {
            if (e.grad.size() == 0) continue;
            if (e.m.size() == 0) {
                e.m.setZero(e.value.rows(), e.value.cols());
                e.v.setZero(e.value.rows(), e.value.cols());
            }
            Mat<T> g = e.grad;
            if (cfg_.kind == OptimizerKind::Adam && cfg_.weight_decay > 0.0) {
                g += static_cast<T>(cfg_.weight_decay) * e.value;  // classic L2
            }
            e.m = static_cast<T>(cfg_.beta1) * e.m + static_cast<T>(1.0 - cfg_.beta1) * g;
            e.v = static_cast<T>(cfg_.beta2) * e.v.array().matrix() +
                  static_cast<T>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
            Mat<T> mhat = e.m / static_cast<T>(bc1);
            Mat<T> vhat = e.v / static_cast<T>(bc2);
            Mat<T> update =
                mhat.array() / (vhat.array().sqrt() + static_cast<T>(cfg_.eps));
            if (cfg_.kind == OptimizerKind::AdamW && cfg_.weight_decay > 0.0) {
                update.array() += static_cast<T>(cfg_.weight_decay) * e.value.array();
            }
            e.value -= static_cast<T>(lr) * update;
        }
    }

private:
    AdamConfig cfg_;
    long t_ = 0;
};

}  // namespace vlci::opt
