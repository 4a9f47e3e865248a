#pragma once

#include "xdiff/common.hpp"
#include "xdiff/world.hpp"

namespace xdiff {

enum class VariantKind { L1, BatchTopK };

struct Variant {
    VariantKind kind = VariantKind::L1;
    double mu = 0.04;     // L1 sparsity weight
    int k = 100;          // BatchTopK: kept activations per sample on average
    int k_aux = 512;      // BatchTopK: dead latents used for the auxiliary loss
    double alpha = 1.0 / 32.0;  // BatchTopK: auxiliary loss weight

    static Variant l1(double mu) {
        Variant v;
        v.kind = VariantKind::L1;
        v.mu = mu;
        return v;
    }
    static Variant batch_topk(int k, int k_aux = 512, double alpha = 1.0 / 32.0) {
        Variant v;
        v.kind = VariantKind::BatchTopK;
        v.k = k;
        v.k_aux = k_aux;
        v.alpha = alpha;
        return v;
    }
};

/// Parameters of a two-model crosscoder. Row j of each matrix belongs to
/// latent j; decoder rows are the per-model latent directions.
struct CrosscoderParams {
    int D = 0;  // dictionary size
    int d = 0;  // model dimension
    Matrix enc_base;   // D x d
    Matrix enc_chat;   // D x d
    Vector b_enc;      // D
    Matrix dec_base;   // D x d
    Matrix dec_chat;   // D x d
    Vector b_dec_base; // d
    Vector b_dec_chat; // d
    Variant variant;
    std::optional<double> theta;  // BatchTopK inference threshold; set by calibration

    double decoder_norm_base(int j) const { return dec_base.row(j).norm(); }
    double decoder_norm_chat(int j) const { return dec_chat.row(j).norm(); }
    // per-latent ||d_base_j|| + ||d_chat_j||
    Vector decoder_norm_sums() const;

    void check_finite() const;
};

struct LatentCodes {
    Matrix f;          // n x D, elementwise >= 0
    BoolMatrix active; // post-selection mask; masked entries contribute zero

    Matrix selected() const { return f.cwiseProduct(active.cast<double>().matrix()); }
};

struct LossBreakdown {
    double recon_base = 0.0;
    double recon_chat = 0.0;
    double sparsity = 0.0;  // mu-weighted, L1 variant
    double aux = 0.0;       // unweighted auxiliary term, BatchTopK variant
    double total = 0.0;
};

LatentCodes encode(const CrosscoderParams& params, const PairedActivationBatch& batch);

Matrix scaled_activation(const CrosscoderParams& params, const LatentCodes& codes);

/// Keeps exactly n*k entries of v (ties: lower sample index, then lower
/// latent index). Throws ConfigError when k > D.
BoolMatrix batch_topk_select(const Matrix& v, int k);

std::pair<Matrix, Matrix> decode(const CrosscoderParams& params, const LatentCodes& codes);

LossBreakdown l1_loss(const CrosscoderParams& params, const PairedActivationBatch& batch);

LossBreakdown batchtopk_loss(const CrosscoderParams& params, const PairedActivationBatch& batch,
                             const std::vector<bool>& dead_mask);

/// Auxiliary-loss selection: top n*k_aux entries of v restricted to dead
/// latents, mirroring the main batch selection.
BoolMatrix aux_select(const Matrix& v, int k_aux, const std::vector<bool>& dead_mask);

/// batchtopk_loss with the selection masks held fixed; used by the
/// straight-through gradient checks.
LossBreakdown batchtopk_loss_fixed_masks(const CrosscoderParams& params,
                                         const PairedActivationBatch& batch,
                                         const BoolMatrix& main_mask, const BoolMatrix& aux_mask);

/// theta = mean over batches of the smallest positive selected v. Batches
/// with no positive selected activation are skipped; all-empty is an error.
double estimate_theta(const CrosscoderParams& params,
                      const std::vector<PairedActivationBatch>& batches);

/// BatchTopK inference: keep f where v > theta. Requires theta.
LatentCodes encode_inference(const CrosscoderParams& params, const PairedActivationBatch& batch);

/// Variant dispatch: encode for L1, encode_inference for BatchTopK.
LatentCodes inference_codes(const CrosscoderParams& params, const PairedActivationBatch& batch);

/// (crosscoder penalty, stacked-SAE penalty) for one latent:
/// f*(||db||+||dc||) vs f*sqrt(||db||^2+||dc||^2).
std::pair<double, double> sparsity_penalties(const Vector& dec_base_j, const Vector& dec_chat_j,
                                             double f);

}  // namespace xdiff
