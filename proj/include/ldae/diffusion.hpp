// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ldae/image.hpp"
#include "ldae/rng.hpp"
#include "ldae/types.hpp"

namespace ldae {

enum class ScheduleKind { ddpm_linear_beta, linear_gamma_sq, fixed_gamma, single_level };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear_gamma_sq;
    int steps = 1000; // T
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double sigma_max = std::sqrt(2.0);
    double sigma_const = std::sqrt(1.0 / 3.0);

    static NoiseSchedule ddpm(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
    static NoiseSchedule linear_gamma_sq(int steps = 1000);
    static NoiseSchedule fixed_gamma(int steps = 1000, double sigma_max = std::sqrt(2.0));
    static NoiseSchedule single_level(int steps = 1000, double sigma_const = std::sqrt(1.0 / 3.0));
};

struct GammaSigma {
    double gamma;
    double sigma;
};

/// Signal and noise scale at step t in [1, T].
GammaSigma gamma_sigma(const NoiseSchedule& schedule, int t);

/// DDPM beta_t for t in [1, T]: linear from beta_start (t = 1) to beta_end (t = T).
double ddpm_beta(const NoiseSchedule& schedule, int t);

/// (t, gamma^2, sigma^2) for every t as CSV.
std::string schedule_csv(const NoiseSchedule& schedule);

template <typename Scalar>
struct DiffusionDraw {
    MatrixX<Scalar> z0;
    int t = 0;
    MatrixX<Scalar> eps;
    MatrixX<Scalar> zt;
    double gamma = 1.0;
    double sigma = 0.0;
};

/// z_t = gamma_t z0 + sigma_t eps with eps ~ N(0, I) drawn from rng in
/// column-major order.
template <typename Scalar>
DiffusionDraw<Scalar> diffuse(const MatrixX<Scalar>& z0, const NoiseSchedule& schedule, int t, Rng& rng) {
    const GammaSigma gs = gamma_sigma(schedule, t);
    DiffusionDraw<Scalar> draw;
    draw.z0 = z0;
    draw.t = t;
    draw.gamma = gs.gamma;
    draw.sigma = gs.sigma;
    draw.eps = rng.normal_matrix<Scalar>(z0.rows(), z0.cols());
    draw.zt = static_cast<Scalar>(gs.gamma) * z0 + static_cast<Scalar>(gs.sigma) * draw.eps;
    return draw;
}

enum class TargetKind { predict_noise, predict_clean, predict_original_image };
enum class WeightKind { snr, gamma_sq, inv_one_plus_sigma_sq, unit };

std::string to_string(TargetKind kind);
std::string to_string(WeightKind kind);
TargetKind parse_target_kind(const std::string& name);
WeightKind parse_weight_kind(const std::string& name);

struct LossSpec {
    TargetKind target = TargetKind::predict_noise;
    WeightKind weight = WeightKind::unit;
    /// w_i for d < i <= D in the residual-weighted loss.
    double residual_weight = 0.1;
};

/// lambda_t for the given weighting rule.
double loss_weight(const NoiseSchedule& schedule, int t, WeightKind kind);

/// eps, z0 or the clean image patches, in the space the network predicts.
/// `x0_patches` is required for predict_original_image.
MatrixX<double> make_target(const LossSpec& spec, const DiffusionDraw<double>& draw,
                            const std::optional<MatrixX<double>>& x0_patches);

/// lambda * mean over tokens of ||pred - target||^2. Optionally writes
/// d loss / d pred.
double token_mse_loss(const MatrixX<double>& pred, const MatrixX<double>& target, double lambda,
                      MatrixX<double>* grad = nullptr);

/// lambda * mean over tokens of sum_i w_i r_i^2 with r = V_full (x0 - pred)
/// per token; w_i = 1 for i < d and w_lo otherwise. V_full must be a square
/// orthonormal basis (checked to 1e-6).
double weighted_residual_loss(const MatrixX<double>& pred_patches, const MatrixX<double>& x0_patches,
                              const MatrixX<double>& full_basis, Index latent_dim, double lambda, double w_lo,
                              MatrixX<double>* grad = nullptr);

/// Image form of the residual-weighted loss; patches are extracted with
/// patch size derived from the basis dimension.
double weighted_residual_loss(const ImageD& pred, const ImageD& x0, const MatrixX<double>& full_basis,
                              Index latent_dim, double lambda, double w_lo);

/// Throws unless max |V V^T - I| < tol and V is square.
void require_orthonormal(const MatrixX<double>& basis, double tol = 1e-6);

} // namespace ldae
