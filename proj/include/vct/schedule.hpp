#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view to_string(ScheduleKind kind);

// Cumulative signal fractions alpha_bar[0..T]. alpha_bar[0] == 1, strictly
// decreasing, alpha_bar[T] in (0, 0.05). Every constructor path validates.
class NoiseSchedule {
public:
    // Throws ValidationError when the invariants do not hold.
    explicit NoiseSchedule(std::vector<double> alpha_bar, ScheduleKind kind = ScheduleKind::linear);

    int steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
    double alpha_bar(int t) const;
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }
    ScheduleKind kind() const noexcept { return kind_; }

    // Sub-schedule on the grid 0, stride, 2*stride, ..., steps() with `n` steps.
    // steps() must be divisible by n.
    NoiseSchedule strided(int n) const;

    // Hex digest of the alpha_bar bytes; used to pair artifacts with schedules.
    std::string hash() const;

    bool operator==(const NoiseSchedule& other) const noexcept { return alpha_bar_ == other.alpha_bar_; }

private:
    std::vector<double> alpha_bar_;
    ScheduleKind kind_;
};

// Linear betas follow the 1000-step [1e-4, 2e-2] grid, rescaled by 1000/T so
// shorter schedules still end near pure noise. Cosine uses the shifted-cosine
// alpha_bar curve with offset 0.008. Betas are capped at 0.999.
NoiseSchedule make_schedule(int T, ScheduleKind kind);

// sqrt(ab[t]) z0 + sqrt(1 - ab[t]) eps
Tensor add_noise(const Tensor& z0, const Tensor& eps, int t, const NoiseSchedule& s);

// (z_t - sqrt(1 - ab[t]) eps_hat) / sqrt(ab[t]); t == 0 is rejected.
Tensor predict_z0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);

// Deterministic (eta = 0) DDIM update from t down to t_prev.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_prev, const NoiseSchedule& s);

// Reverse DDIM update from t up to t_next. At t == 0 the clean-latent estimate is z_t itself.
Tensor ddim_invert_step(const Tensor& z_t, const Tensor& eps_hat, int t, int t_next, const NoiseSchedule& s);

}  // namespace vct
