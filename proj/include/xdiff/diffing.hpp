#pragma once

#include "xdiff/crosscoder.hpp"

namespace xdiff {

enum class LatentClass { BaseOnly, ChatOnly, Shared, Other, Dead };

const char* to_string(LatentClass c);

struct LatentClassification {
    int latent = 0;
    double delta_norm = 0.0;  // undefined when dead
    LatentClass cls = LatentClass::Dead;
    double freq = 0.0;
};

struct TwinPair {
    int chat_latent = 0;
    int base_latent = 0;
    double cosine = 0.0;
    double divergence = 0.0;  // filled by activation_divergence when traces are given
};

constexpr double kDeadNormEps = 1e-12;

/// Relative decoder norm difference in [0,1]; nullopt when both norms are
/// (numerically) zero.
std::optional<double> delta_norm(const CrosscoderParams& params, int j);

/// Norm-band classification: base-only [0,0.1], shared [0.4,0.6],
/// chat-only [0.9,1.0], other elsewhere; dead latents get LatentClass::Dead.
std::vector<LatentClassification> classify(const CrosscoderParams& params);

/// classify + firing frequencies over batches; latents that never fire are
/// reclassified as dead.
std::vector<LatentClassification> classify_with_freq(const CrosscoderParams& params,
                                                     const std::vector<PairedActivationBatch>& batches);

/// For each chat-only latent, its best base-only match by
/// cos(dec_chat[j], dec_base[j']); kept when cosine > threshold.
std::vector<TwinPair> twin_pairs(const CrosscoderParams& params,
                                 const std::vector<LatentClassification>& classes,
                                 double threshold = 0.9);

/// Divergence of a latent pair in [0,1]; nullopt when no high
/// activation occurs on the validation traces. Uses scaled activations for
/// both the max and the event thresholds.
std::optional<double> activation_divergence(const CrosscoderParams& params, int latent_i,
                                            int latent_j,
                                            const std::vector<PairedActivationBatch>& train_batches,
                                            const std::vector<PairedActivationBatch>& val_batches);

/// Fraction of samples with a nonzero inference code, per latent.
Vector frequency_stats(const CrosscoderParams& params,
                       const std::vector<PairedActivationBatch>& batches);

}  // namespace xdiff
