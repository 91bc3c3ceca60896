#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/rng.hpp"

namespace layoutdiff {

enum class ScheduleFamily { linear_beta, cosine };

inline const char* to_string(ScheduleFamily f) {
    return f == ScheduleFamily::linear_beta ? "linear_beta" : "cosine";
}

inline ScheduleFamily schedule_family_from_string(const std::string& s) {
    if (s == "linear_beta") return ScheduleFamily::linear_beta;
    if (s == "cosine") return ScheduleFamily::cosine;
    throw ConfigError("unknown schedule family '" + s + "'");
}

// Fold a scaling factor s into the cumulative signal coefficient:
//   scaled = abar * s^2 / (1 + abar * (s^2 - 1))
// Identity at s = 1, fixes both endpoints, strictly increasing in abar, and
// composes multiplicatively in s.
inline double scaled_alpha_bar(double alpha_bar_t, double s) {
    const double s2 = s * s;
    return alpha_bar_t * s2 / (1.0 + alpha_bar_t * (s2 - 1.0));
}

// Cumulative signal coefficients of the forward process, with the scaling
// transform baked into a precomputed table at construction. Immutable.
struct NoiseSchedule {
    int steps = 0;                          // T
    double scale = 1.0;                     // s
    ScheduleFamily family = ScheduleFamily::linear_beta;
    std::vector<double> alpha_bar;          // length T+1, alpha_bar[0] == 1, strictly decreasing
    std::vector<double> alpha_bar_scaled;   // same grid after scaling

    static NoiseSchedule make(int steps, double scale = 1.0,
                              ScheduleFamily family = ScheduleFamily::linear_beta) {
        if (steps < 1) throw InvalidArgumentError("schedule needs at least 1 step");
        if (!(scale > 0.0)) throw InvalidArgumentError("schedule scale must be positive");
        NoiseSchedule sched;
        sched.steps = steps;
        sched.scale = scale;
        sched.family = family;
        sched.alpha_bar.resize(static_cast<std::size_t>(steps) + 1);
        sched.alpha_bar[0] = 1.0;
        if (family == ScheduleFamily::linear_beta) {
            // DDPM linear betas, range rescaled by 1000/T so the signal still
            // decays to ~0 at shorter horizons.
            const double lo = 1e-4 * 1000.0 / steps;
            const double hi = 0.02 * 1000.0 / steps;
            double prod = 1.0;
            for (int t = 1; t <= steps; ++t) {
                const double beta = steps == 1 ? hi : lo + (hi - lo) * (t - 1) / (steps - 1.0);
                prod *= 1.0 - beta;
                sched.alpha_bar[static_cast<std::size_t>(t)] = prod;
            }
        } else {
            const auto f = [&](double t) {
                const double x = (t / steps + 0.008) / 1.008 * (3.14159265358979323846 / 2.0);
                const double c = std::cos(x);
                return c * c;
            };
            const double f0 = f(0.0);
            for (int t = 1; t <= steps; ++t) {
                sched.alpha_bar[static_cast<std::size_t>(t)] = f(static_cast<double>(t)) / f0;
            }
        }
        // Floor the tail before scaling so log/SNR of the scaled table stays
        // finite, then enforce strict monotonicity.
        for (int t = 1; t <= steps; ++t) {
            auto& a = sched.alpha_bar[static_cast<std::size_t>(t)];
            a = std::max(a, 1e-5);
            const double prev = sched.alpha_bar[static_cast<std::size_t>(t - 1)];
            if (!(a < prev)) a = prev * (1.0 - 1e-9);
        }
        sched.alpha_bar_scaled.resize(sched.alpha_bar.size());
        for (std::size_t i = 0; i < sched.alpha_bar.size(); ++i) {
            sched.alpha_bar_scaled[i] = scaled_alpha_bar(sched.alpha_bar[i], scale);
        }
        return sched;
    }

    double abar(int t) const {
        if (t < 0 || t > steps) throw IndexError("timestep " + std::to_string(t) + " out of range");
        return alpha_bar[static_cast<std::size_t>(t)];
    }

    double abar_scaled(int t) const {
        if (t < 0 || t > steps) throw IndexError("timestep " + std::to_string(t) + " out of range");
        return alpha_bar_scaled[static_cast<std::size_t>(t)];
    }

    // Signal-to-noise ratio of the scaled process.
    double snr(int t) const {
        const double a = abar_scaled(t);
        return a / (1.0 - a + 1e-300);
    }
};

// Noised state plus the exact noise that produced it.
struct ForwardSample {
    Eigen::MatrixXd noised;  // B_t
    Eigen::MatrixXd noise;   // E_t
    int t = 0;
};

// B_t = sqrt(abar'_t) * B_0 + sqrt(1 - abar'_t) * E_t, element-wise.
inline ForwardSample forward_diffuse(const Eigen::MatrixXd& b0, int t, const NoiseSchedule& schedule,
                                     const Eigen::MatrixXd& noise) {
    if (t < 0 || t > schedule.steps) {
        throw IndexError("timestep " + std::to_string(t) + " outside [0, " +
                         std::to_string(schedule.steps) + "]");
    }
    if (noise.rows() != b0.rows() || noise.cols() != b0.cols()) {
        throw ContractError("noise shape does not match input");
    }
    const double a = schedule.abar_scaled(t);
    ForwardSample out;
    out.noised = std::sqrt(a) * b0 + std::sqrt(1.0 - a) * noise;
    out.noise = noise;
    out.t = t;
    return out;
}

// Empirical check that the scaled forward process keeps zero mean and unit
// variance when fed zero-mean unit-variance data.
struct NormalizationReport {
    double worst_mean_dev = 0.0;
    double worst_var_dev = 0.0;
    int worst_mean_t = 0;
    int worst_var_t = 0;
    std::vector<double> mean_by_t;  // index t-1
    std::vector<double> var_by_t;
};

inline NormalizationReport verify_normalization(double s, const NoiseSchedule& schedule, long samples,
                                                std::uint64_t seed = 0x5eedULL) {
    NormalizationReport report;
    report.mean_by_t.resize(static_cast<std::size_t>(schedule.steps));
    report.var_by_t.resize(static_cast<std::size_t>(schedule.steps));
    Rng rng(seed);
    // One pool of draws reused across timesteps; the statistic is per-t.
    std::vector<double> x0(static_cast<std::size_t>(samples));
    std::vector<double> eps(static_cast<std::size_t>(samples));
    for (long i = 0; i < samples; ++i) {
        x0[static_cast<std::size_t>(i)] = rng.gaussian();
        eps[static_cast<std::size_t>(i)] = rng.gaussian();
    }
    for (int t = 1; t <= schedule.steps; ++t) {
        const double a = scaled_alpha_bar(schedule.abar(t), s);
        const double ca = std::sqrt(a);
        const double cb = std::sqrt(1.0 - a);
        double sum = 0.0, sumsq = 0.0;
        for (long i = 0; i < samples; ++i) {
            const double v = ca * x0[static_cast<std::size_t>(i)] + cb * eps[static_cast<std::size_t>(i)];
            sum += v;
            sumsq += v * v;
        }
        const double mean = sum / samples;
        const double var = sumsq / samples - mean * mean;
        report.mean_by_t[static_cast<std::size_t>(t - 1)] = mean;
        report.var_by_t[static_cast<std::size_t>(t - 1)] = var;
        if (std::abs(mean) > std::abs(report.worst_mean_dev)) {
            report.worst_mean_dev = mean;
            report.worst_mean_t = t;
        }
        if (std::abs(var - 1.0) > std::abs(report.worst_var_dev)) {
            report.worst_var_dev = var - 1.0;
            report.worst_var_t = t;
        }
    }
    return report;
}

// Evenly spaced subsequence of {1..T}, strictly decreasing and starting at T.
inline std::vector<int> respaced_timesteps(int steps, int k) {
    if (k < 1 || k > steps) {
        throw InvalidArgumentError("sampling steps must be in [1, " + std::to_string(steps) +
                                   "], got " + std::to_string(k));
    }
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    if (k == 1) {
        out.push_back(steps);
        return out;
    }
    for (int i = 0; i < k; ++i) {
        const double pos = static_cast<double>(i) * (steps - 1) / (k - 1);
        out.push_back(steps - static_cast<int>(std::llround(pos)));
    }
    return out;
}

struct ScheduleRow {
    int t;
    double alpha_bar;
    double alpha_bar_scaled;
    double snr;
};

inline std::vector<ScheduleRow> schedule_table(const NoiseSchedule& schedule) {
    std::vector<ScheduleRow> rows;
    rows.reserve(static_cast<std::size_t>(schedule.steps) + 1);
    for (int t = 0; t <= schedule.steps; ++t) {
        rows.push_back({t, schedule.abar(t), schedule.abar_scaled(t), schedule.snr(t)});
    }
    return rows;
}

}  // namespace layoutdiff
