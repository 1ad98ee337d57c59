#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "vlmatch/encoders.hpp"

namespace vlmatch {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::map<std::string, double> group_lr;  ///< per-group override of lr
    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// Adam with bias correction. Parameters in frozen groups are skipped and
/// keep no state.
class Adam {
public:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };

    explicit Adam(AdamConfig config = {});

    /// Throws StateError if a trainable parameter carries no gradient.
    void step(ModelParams& params);

    std::size_t steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return config_; }
    const std::map<std::string, Moments>& state() const noexcept { return state_; }

private:
    AdamConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Plain gradient descent, p <- p - lr * g, frozen groups skipped.
class Sgd {
public:
    explicit Sgd(double lr);
    void step(ModelParams& params);

private:
    double lr_;
};

}  // namespace vlmatch
