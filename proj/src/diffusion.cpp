// SPDX-License-Identifier: Apache-2.0
#include "ldae/diffusion.hpp"

#include <sstream>
#include <stdexcept>

#include "ldae/patches.hpp"

namespace ldae {

std::string to_string(ScheduleKind kind) {
    switch (kind) {
    case ScheduleKind::ddpm_linear_beta:
        return "ddpm_linear_beta";
    case ScheduleKind::linear_gamma_sq:
        return "linear_gamma_sq";
    case ScheduleKind::fixed_gamma:
        return "fixed_gamma";
    case ScheduleKind::single_level:
        return "single_level";
    }
    return "unknown";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "ddpm_linear_beta" || name == "ddpm") {
        return ScheduleKind::ddpm_linear_beta;
    }
    if (name == "linear_gamma_sq") {
        return ScheduleKind::linear_gamma_sq;
    }
    if (name == "fixed_gamma") {
        return ScheduleKind::fixed_gamma;
    }
    if (name == "single_level") {
        return ScheduleKind::single_level;
    }
    throw std::invalid_argument("unknown noise schedule '" + name + "'");
}

NoiseSchedule NoiseSchedule::ddpm(int steps, double beta_start, double beta_end) {
    NoiseSchedule s;
    s.kind = ScheduleKind::ddpm_linear_beta;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    return s;
}

NoiseSchedule NoiseSchedule::linear_gamma_sq(int steps) {
    NoiseSchedule s;
    s.kind = ScheduleKind::linear_gamma_sq;
    s.steps = steps;
    return s;
}

NoiseSchedule NoiseSchedule::fixed_gamma(int steps, double sigma_max) {
    NoiseSchedule s;
    s.kind = ScheduleKind::fixed_gamma;
    s.steps = steps;
    s.sigma_max = sigma_max;
    return s;
}

NoiseSchedule NoiseSchedule::single_level(int steps, double sigma_const) {
    NoiseSchedule s;
    s.kind = ScheduleKind::single_level;
    s.steps = steps;
    s.sigma_const = sigma_const;
    return s;
}

double ddpm_beta(const NoiseSchedule& schedule, int t) {
    if (schedule.steps == 1) {
        return schedule.beta_start;
    }
    return schedule.beta_start +
           (schedule.beta_end - schedule.beta_start) * static_cast<double>(t - 1) / (schedule.steps - 1);
}

GammaSigma gamma_sigma(const NoiseSchedule& schedule, int t) {
    if (schedule.steps < 1) {
        throw std::invalid_argument("noise schedule: T must be at least 1");
    }
    if (t < 1 || t > schedule.steps) {
        throw std::invalid_argument("noise schedule: t = " + std::to_string(t) + " outside [1, " +
                                    std::to_string(schedule.steps) + "]");
    }
    const double frac = static_cast<double>(t) / schedule.steps;
    switch (schedule.kind) {
    case ScheduleKind::ddpm_linear_beta: {
        double g2 = 1.0;
        for (int s = 1; s <= t; ++s) {
            g2 *= 1.0 - ddpm_beta(schedule, s);
        }
        return {std::sqrt(g2), std::sqrt(1.0 - g2)};
    }
    case ScheduleKind::linear_gamma_sq:
        return {std::sqrt(1.0 - frac), std::sqrt(frac)};
    case ScheduleKind::fixed_gamma:
        return {1.0, schedule.sigma_max * frac};
    case ScheduleKind::single_level:
        return {1.0, schedule.sigma_const};
    }
    throw std::invalid_argument("noise schedule: unknown kind");
}

std::string schedule_csv(const NoiseSchedule& schedule) {
    std::ostringstream out;
    out.precision(17);
    out << "t,gamma_sq,sigma_sq\n";
    for (int t = 1; t <= schedule.steps; ++t) {
        const GammaSigma gs = gamma_sigma(schedule, t);
        out << t << ',' << gs.gamma * gs.gamma << ',' << gs.sigma * gs.sigma << '\n';
    }
    return out.str();
}

std::string to_string(TargetKind kind) {
    switch (kind) {
    case TargetKind::predict_noise:
        return "predict_noise";
    case TargetKind::predict_clean:
        return "predict_clean";
    case TargetKind::predict_original_image:
        return "predict_original_image";
    }
    return "unknown";
}

std::string to_string(WeightKind kind) {
    switch (kind) {
    case WeightKind::snr:
        return "snr";
    case WeightKind::gamma_sq:
        return "gamma_sq";
    case WeightKind::inv_one_plus_sigma_sq:
        return "inv_one_plus_sigma_sq";
    case WeightKind::unit:
        return "unit";
    }
    return "unknown";
}

TargetKind parse_target_kind(const std::string& name) {
    if (name == "predict_noise") {
        return TargetKind::predict_noise;
    }
    if (name == "predict_clean") {
        return TargetKind::predict_clean;
    }
    if (name == "predict_original_image") {
        return TargetKind::predict_original_image;
    }
    throw std::invalid_argument("unknown prediction target '" + name + "'");
}

WeightKind parse_weight_kind(const std::string& name) {
    if (name == "snr") {
        return WeightKind::snr;
    }
    if (name == "gamma_sq") {
        return WeightKind::gamma_sq;
    }
    if (name == "inv_one_plus_sigma_sq") {
        return WeightKind::inv_one_plus_sigma_sq;
    }
    if (name == "unit") {
        return WeightKind::unit;
    }
    throw std::invalid_argument("unknown loss weight '" + name + "'");
}

double loss_weight(const NoiseSchedule& schedule, int t, WeightKind kind) {
    const GammaSigma gs = gamma_sigma(schedule, t);
    switch (kind) {
    case WeightKind::snr:
        if (gs.sigma <= 0.0) {
            throw std::invalid_argument("loss_weight: snr weight undefined at sigma = 0 (t = " + std::to_string(t) +
                                        ")");
        }
        return (gs.gamma * gs.gamma) / (gs.sigma * gs.sigma);
    case WeightKind::gamma_sq:
        return gs.gamma * gs.gamma;
    case WeightKind::inv_one_plus_sigma_sq:
        return 1.0 / (1.0 + gs.sigma * gs.sigma);
    case WeightKind::unit:
        return 1.0;
    }
    throw std::invalid_argument("loss_weight: unknown kind");
}

MatrixX<double> make_target(const LossSpec& spec, const DiffusionDraw<double>& draw,
                            const std::optional<MatrixX<double>>& x0_patches) {
    switch (spec.target) {
    case TargetKind::predict_noise:
        return draw.eps;
    case TargetKind::predict_clean:
        return draw.z0;
    case TargetKind::predict_original_image:
        if (!x0_patches) {
            throw std::invalid_argument("make_target: predict_original_image needs the clean image");
        }
        return *x0_patches;
    }
    throw std::invalid_argument("make_target: unknown target");
}

double token_mse_loss(const MatrixX<double>& pred, const MatrixX<double>& target, double lambda,
                      MatrixX<double>* grad) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw std::invalid_argument("token_mse_loss: prediction and target shapes differ");
    }
    const double n = static_cast<double>(pred.rows());
    const MatrixX<double> diff = pred - target;
    if (grad) {
        *grad = (2.0 * lambda / n) * diff;
    }
    return lambda * diff.squaredNorm() / n;
}

void require_orthonormal(const MatrixX<double>& basis, double tol) {
    if (basis.rows() != basis.cols()) {
        throw std::invalid_argument("residual loss: full basis must be square, got " + std::to_string(basis.rows()) +
                                    "x" + std::to_string(basis.cols()));
    }
    const double err =
        (basis * basis.transpose() - MatrixX<double>::Identity(basis.rows(), basis.rows())).cwiseAbs().maxCoeff();
    if (!(err < tol)) {
        throw std::invalid_argument("residual loss: full basis is not orthonormal (max |V V^T - I| = " +
                                    std::to_string(err) + ")");
    }
}

double weighted_residual_loss(const MatrixX<double>& pred_patches, const MatrixX<double>& x0_patches,
                              const MatrixX<double>& full_basis, Index latent_dim, double lambda, double w_lo,
                              MatrixX<double>* grad) {
    require_orthonormal(full_basis);
    if (pred_patches.rows() != x0_patches.rows() || pred_patches.cols() != x0_patches.cols() ||
        pred_patches.cols() != full_basis.cols()) {
        throw std::invalid_argument("residual loss: shape mismatch between prediction, image and basis");
    }
    if (latent_dim < 0 || latent_dim > full_basis.rows()) {
        throw std::invalid_argument("residual loss: latent dim out of range");
    }
    if (w_lo < 0.0 || w_lo > 1.0) {
        throw std::invalid_argument("residual loss: w_lo must lie in [0, 1]");
    }
    const double n = static_cast<double>(pred_patches.rows());
    const MatrixX<double> r = (x0_patches - pred_patches) * full_basis.transpose();
    Eigen::RowVectorXd w = Eigen::RowVectorXd::Constant(full_basis.rows(), w_lo);
    w.head(latent_dim).setOnes();
    const MatrixX<double> wr = r.array().rowwise() * w.array();
    if (grad) {
        *grad = (-2.0 * lambda / n) * (wr * full_basis);
    }
    return lambda * r.cwiseProduct(wr).sum() / n;
}

double weighted_residual_loss(const ImageD& pred, const ImageD& x0, const MatrixX<double>& full_basis,
                              Index latent_dim, double lambda, double w_lo) {
    const auto p = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(full_basis.cols()) / 3.0)));
    if (p * p * 3 != full_basis.cols()) {
        throw std::invalid_argument("residual loss: basis dimension is not p*p*3");
    }
    if (pred.height() != x0.height() || pred.width() != x0.width()) {
        throw std::invalid_argument("residual loss: image dimensions differ");
    }
    return weighted_residual_loss(extract_patches(pred, p), extract_patches(x0, p), full_basis, latent_dim, lambda,
                                  w_lo);
}

} // namespace ldae
