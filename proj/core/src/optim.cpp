#include "vlmatch/optim.hpp"

#include <cmath>

#include "vlmatch/error.hpp"

namespace vlmatch {

namespace {

void require_grad(const std::string& name, const Tensor& p) {
    if (p.grad().size() != p.size()) {
        throw StateError("optimizer: parameter " + name + " has no gradient");
    }
}

}  // namespace

Adam::Adam(AdamConfig config) : config_(config) {
    if (!(config.lr > 0.0)) throw ParameterError("adam: lr must be positive");
    if (!(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0)) {
        throw ParameterError("adam: betas must be in [0, 1)");
    }
    if (!(config.eps > 0.0)) throw ParameterError("adam: eps must be positive");
}

void Adam::step(ModelParams& params) {
    for (const auto& [gname, group] : params.groups()) {
        if (params.is_frozen(gname)) continue;
        for (const auto& [pname, p] : group) require_grad(gname + "." + pname, p);
    }
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (const auto& gname : params.group_names()) {
        if (params.is_frozen(gname)) continue;
        const auto lr_it = config_.group_lr.find(gname);
        const double lr = lr_it == config_.group_lr.end() ? config_.lr : lr_it->second;
        for (auto& [pname, p] : params.group(gname)) {
            auto& st = state_[gname + "." + pname];
            const std::size_t n = p.size();
            if (st.m.size() != n) {
                st.m.assign(n, 0.0);
                st.v.assign(n, 0.0);
            }
            const auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < n; ++i) {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                const double mhat = st.m[i] / c1;
                const double vhat = st.v[i] / c2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
            }
        }
    }
}

Sgd::Sgd(double lr) : lr_(lr) {
    if (!(lr > 0.0)) throw ParameterError("sgd: lr must be positive");
}

void Sgd::step(ModelParams& params) {
    for (const auto& gname : params.group_names()) {
        if (params.is_frozen(gname)) continue;
        for (auto& [pname, p] : params.group(gname)) {
            require_grad(gname + "." + pname, p);
            const auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
        }
    }
}

}  // namespace vlmatch
