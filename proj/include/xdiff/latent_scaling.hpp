#pragma once

#include "xdiff/crosscoder.hpp"

namespace xdiff {

enum class TargetKind { Reconstruction, Error };
enum class ModelSide { Base, Chat };

struct BetaQuadruple {
    int latent = 0;
    double beta_r_base = 0.0;
    double beta_r_chat = 0.0;
    double beta_eps_base = 0.0;
    double beta_eps_chat = 0.0;
    double nu_r = 0.0;
    double nu_eps = 0.0;
    long support = 0;            // samples with a nonzero code
    bool negative_base_flag = false;
    bool low_support_flag = false;   // support < 10
    bool ratio_undefined_flag = false;  // a chat beta denominator was zero
    bool excluded = false;           // never fired; no betas reported
};

/// Closed-form minimizer of sum_i ||beta * f_i * d - y_i||^2:
/// beta = d^T (Y^T f) / (||f||^2 ||d||^2). Throws on zero f or d.
double beta_closed_form(const Vector& f, const Vector& d, const Matrix& Y);

/// Target matrix for latent j. Reconstruction targets are the raw
/// activations; error targets are leave-one-out residuals
/// h - sum_{k != j} f_k d_k - b_dec.
Matrix scaling_targets(const CrosscoderParams& params, const PairedActivationBatch& batch, int j,
                       TargetKind kind, ModelSide model);

/// Betas for every latent in latent_set, pooled over all batches with
/// running accumulators (single pass, Y never materialized per latent).
/// All four fits use the chat decoder direction.
std::vector<BetaQuadruple> latent_scaling_report(const CrosscoderParams& params,
                                                 const std::vector<PairedActivationBatch>& batches,
                                                 const std::vector<int>& latent_set);

/// (MSE_original - MSE_scaled) / MSE_original for latent j, where original
/// uses the model's own decoder contribution and scaled applies the fitted
/// beta to the chat decoder direction. Throws when MSE_original is zero.
double mse_improvement(const CrosscoderParams& params,
                       const std::vector<PairedActivationBatch>& batches, int j, ModelSide model,
                       TargetKind kind);

/// Sort key from the combined ranks of nu_eps and nu_r (low = most
/// chat-specific). Entries excluded from the report get the worst rank.
std::vector<int> rank_by_nu_sum(const std::vector<BetaQuadruple>& report);

}  // namespace xdiff
