#include "vct/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vct/hashing.hpp"

namespace vct {

namespace {

constexpr double kMaxBeta = 0.999;
constexpr double kTerminalCeiling = 0.05;

void check_index(int t, const NoiseSchedule& s, const char* what) {
    if (t < 0 || t > s.steps()) {
        throw ValidationError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(s.steps()) + "]");
    }
}

}  // namespace

ScheduleKind parse_schedule_kind(std::string_view name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "cosine") return ScheduleKind::cosine;
    throw ValidationError("unknown schedule kind '" + std::string(name) + "'");
}

std::string_view to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::cosine: return "cosine";
    }
    return "unknown";
}

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar, ScheduleKind kind)
    : alpha_bar_(std::move(alpha_bar)), kind_(kind) {
    if (alpha_bar_.size() < 3) throw ValidationError("noise schedule needs T >= 2");
    if (alpha_bar_.front() != 1.0) throw ValidationError("noise schedule must start at alpha_bar[0] = 1");
    for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
        if (!std::isfinite(alpha_bar_[t]) || !(alpha_bar_[t] < alpha_bar_[t - 1])) {
            throw ValidationError("noise schedule not strictly decreasing at t = " + std::to_string(t));
        }
    }
    const double last = alpha_bar_.back();
    if (!(last > 0.0) || !(last < kTerminalCeiling)) {
        throw ValidationError("noise schedule must end with 0 < alpha_bar[T] < 0.05, got " + std::to_string(last));
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    check_index(t, *this, "alpha_bar");
    return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule NoiseSchedule::strided(int n) const {
    if (n < 2 || steps() % n != 0) {
        throw ValidationError("cannot stride a " + std::to_string(steps()) + "-step schedule into " +
                              std::to_string(n) + " steps");
    }
    const int stride = steps() / n;
    std::vector<double> sub;
    sub.reserve(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) sub.push_back(alpha_bar_[static_cast<std::size_t>(i * stride)]);
    return NoiseSchedule(std::move(sub), kind_);
}

std::string NoiseSchedule::hash() const {
    return sha256_hex(std::as_bytes(std::span(alpha_bar_)));
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
    if (T < 2) throw ValidationError("make_schedule: T must be >= 2, got " + std::to_string(T));
    std::vector<double> alpha_bar(static_cast<std::size_t>(T) + 1);
    alpha_bar[0] = 1.0;
    if (kind == ScheduleKind::linear) {
        const double scale = 1000.0 / T;
        const double lo = 1e-4 * scale;
        const double hi = 2e-2 * scale;
        for (int t = 1; t <= T; ++t) {
            const double frac = static_cast<double>(t - 1) / (T - 1);
            const double beta = std::min(lo + (hi - lo) * frac, kMaxBeta);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
        }
    } else {
        constexpr double offset = 0.008;
        auto curve = [&](double t) {
            const double c = std::cos((t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (int t = 1; t <= T; ++t) {
            const double beta = std::min(1.0 - curve(t) / curve(t - 1), kMaxBeta);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
        }
    }
    return NoiseSchedule(std::move(alpha_bar), kind);
}

Tensor add_noise(const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& s) {
    require_same_shape(z0, eps, "add_noise");
    check_index(t, s, "add_noise");
    const double ab = s.alpha_bar(t);
    Tensor out = std::sqrt(ab) * z0;
    out.axpy(std::sqrt(1.0 - ab), eps);
    return out;
}

Tensor predict_z0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
    require_same_shape(z_t, eps_hat, "predict_z0");
    check_index(t, s, "predict_z0");
    if (t == 0) throw ValidationError("predict_z0: t = 0 has no noise to remove");
    const double ab = s.alpha_bar(t);
    Tensor out = z_t;
    out.axpy(-std::sqrt(1.0 - ab), eps_hat);
    out *= 1.0 / std::sqrt(ab);
    return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& s) {
    check_index(t, s, "ddim_step");
    check_index(t_prev, s, "ddim_step");
    if (!(t_prev < t)) {
        throw ValidationError("ddim_step: need t_prev < t, got " + std::to_string(t_prev) + " >= " + std::to_string(t));
    }
    const double ab_prev = s.alpha_bar(t_prev);
    Tensor out = std::sqrt(ab_prev) * predict_z0(z_t, eps_hat, t, s);
    out.axpy(std::sqrt(1.0 - ab_prev), eps_hat);
    return out;
}

Tensor ddim_invert_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_next, const NoiseSchedule& s) {
    require_same_shape(z_t, eps_hat, "ddim_invert_step");
    check_index(t, s, "ddim_invert_step");
    check_index(t_next, s, "ddim_invert_step");
    if (!(t < t_next)) {
        throw ValidationError("ddim_invert_step: need t < t_next, got " + std::to_string(t) +
                              " >= " + std::to_string(t_next));
    }
    const double ab_next = s.alpha_bar(t_next);
    Tensor clean = t == 0 ? z_t : predict_z0(z_t, eps_hat, t, s);
    Tensor out = std::sqrt(ab_next) * clean;
    out.axpy(std::sqrt(1.0 - ab_next), eps_hat);
    return out;
}

}  // namespace vct
