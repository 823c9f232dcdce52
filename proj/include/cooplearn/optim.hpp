#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "cooplearn/params.hpp"

namespace coop {

struct AdamWConfig {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    bool cosine_decay = true;
    std::size_t total_steps = 0;  // required when cosine_decay
};

// Adam with decoupled weight decay and optional cosine-annealed learning rate.
class AdamW {
public:
    AdamW(AdamWConfig cfg, std::size_t param_count)
        : cfg_(cfg), m_(param_count, 0.0), v_(param_count, 0.0) {
        if (cfg_.cosine_decay && cfg_.total_steps == 0)
            throw std::invalid_argument("AdamW: cosine decay needs total_steps");
    }

    double current_lr() const {
        if (!cfg_.cosine_decay) return cfg_.lr;
        const double frac =
            static_cast<double>(step_) / static_cast<double>(cfg_.total_steps);
        const double clamped = frac > 1.0 ? 1.0 : frac;
        return cfg_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * clamped));
    }

    // Applies one update to the store's flattened parameters.
    void step(ParamStore& store, const std::vector<double>& grad) {
        if (grad.size() != m_.size())
            throw std::invalid_argument("AdamW: gradient size " + std::to_string(grad.size()) +
                                        " != state size " + std::to_string(m_.size()));
        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        std::vector<double> flat = store.flatten();
        for (std::size_t i = 0; i < flat.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            flat[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * flat[i]);
        }
        store.assign_flat(flat);
    }

    std::size_t steps_taken() const { return step_; }

private:
    AdamWConfig cfg_;
    std::vector<double> m_, v_;
    std::size_t step_ = 0;
};

}  // namespace coop
