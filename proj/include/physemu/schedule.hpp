#pragma once

#include <cmath>
#include <string>

#include "physemu/core.hpp"

namespace physemu {
namespace schedule {

// Inverse-square-root schedule with linear warmup and square-root cooldown,
// stepped once per epoch (0-indexed).
struct ScheduleConfig {
    int64_t total_epochs = 0;   // E
    int64_t warmup_epochs = 0;  // W
    int64_t cooldown_epochs = 0; // C
    double alpha = 0.1;         // warmup starting factor
    double kappa = 128.0;       // decay offset
    double lr_peak = 5e-5;

    void validate() const {
        if (total_epochs <= 0) raise<ConfigError>("schedule: total_epochs must be positive");
        if (warmup_epochs < 0 || cooldown_epochs < 0) raise<ConfigError>("schedule: negative phase length");
        if (warmup_epochs + cooldown_epochs > total_epochs)
            raise<ConfigError>("schedule: warmup + cooldown (", warmup_epochs + cooldown_epochs, ") exceeds total epochs (",
                               total_epochs, ")");
        if (!(alpha > 0.0 && alpha <= 1.0)) raise<ConfigError>("schedule: alpha must lie in (0, 1]");
        if (!(kappa > 0.0)) raise<ConfigError>("schedule: kappa must be positive");
        if (!(lr_peak > 0.0)) raise<ConfigError>("schedule: lr_peak must be positive");
    }

    // Terminal value of the decay phase; anchors the cooldown ramp. Note the
    // offset uses E - C + kappa as written, which does not coincide with the
    // last decay epoch's value when W > 0 (small jump at the phase boundary).
    double lr_end() const {
        return lr_peak / (1.0 + std::sqrt(double(total_epochs - cooldown_epochs) + kappa) - std::sqrt(kappa));
    }
};

inline double lr_at_epoch(int64_t e, const ScheduleConfig& cfg) {
    cfg.validate();
    if (e < 0 || e > cfg.total_epochs) raise<ConfigError>("lr_at_epoch: epoch ", e, " outside [0, ", cfg.total_epochs, "]");
    const int64_t W = cfg.warmup_epochs, C = cfg.cooldown_epochs, E = cfg.total_epochs;
    if (e <= W) {
        const double frac = W == 0 ? 1.0 : double(e) / double(W);
        return cfg.lr_peak * (cfg.alpha + (1.0 - cfg.alpha) * frac);
    }
    if (e <= E - C) {
        const double s = double(e - W);
        return cfg.lr_peak / (1.0 + std::sqrt(s + cfg.kappa) - std::sqrt(cfg.kappa));
    }
    const double t = double(e - (E - C));
    return cfg.lr_end() * (1.0 - std::sqrt((t - 1.0) / double(C)));
}

// Tokeniser pretraining uses no scheduler; the learning rate is constant.
inline double schedule_constant() { return 5e-4; }

// ----------------------------- optimiser configuration -----------------------------

struct OptimiserConfig {
    std::string kind = "adamw"; // pluggable slot; adamw is the default backend
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double eps = 1e-8;
    double grad_clip = 0.0; // global L2 norm; 0 disables

    void validate() const {
        if (kind != "adamw") raise<ConfigError>("optimiser: unknown kind '", kind, "' (the pluggable slot ships with adamw)");
        if (!(lr > 0.0)) raise<ConfigError>("optimiser: lr must be positive");
        if (grad_clip < 0.0) raise<ConfigError>("optimiser: grad_clip must be non-negative");
    }

    // Pretraining row. The optimiser slot is pluggable; AdamW is the
    // built-in backend and ships with these settings.
    static OptimiserConfig tokeniser_reference() {
        OptimiserConfig c;
        c.lr = 5e-4;
        c.beta1 = 0.95;
        c.beta2 = 0.95;
        c.weight_decay = 0.01;
        c.eps = 1e-8;
        c.grad_clip = 0.5;
        return c;
    }

    static OptimiserConfig rollout_reference() {
        OptimiserConfig c;
        c.lr = 5e-5;
        c.beta1 = 0.9;
        c.beta2 = 0.999;
        c.weight_decay = 1e-4;
        c.eps = 1e-10;
        c.grad_clip = 5.0;
        return c;
    }
};

} // namespace schedule
} // namespace physemu
