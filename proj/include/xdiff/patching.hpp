#pragma once

#include "xdiff/crosscoder.hpp"
#include "xdiff/world.hpp"

namespace xdiff {

enum class PatchMode { None, All, Error, LatentSet, Template };

struct PatchSpec {
    PatchMode mode = PatchMode::None;
    std::vector<int> latents;  // LatentSet only; must be nonempty there
    std::string label;

    static PatchSpec none() { return {PatchMode::None, {}, "none"}; }
    static PatchSpec all() { return {PatchMode::All, {}, "all"}; }
    static PatchSpec error() { return {PatchMode::Error, {}, "error"}; }
    static PatchSpec latent_set(std::vector<int> s, std::string label = "latent_set");
    static PatchSpec template_tokens() { return {PatchMode::Template, {}, "template"}; }

    void validate(int D) const;
};

struct PatchResult {
    std::string label;
    std::vector<double> kl_per_position;
    double kl_mean_all = 0.0;
    double kl_mean_first9 = 0.0;  // positions 2..10; position 1 excluded
    long n_positions = 0;
};

/// Chat-activation approximation h_a for one batch. Latent substitution
/// swaps the selected latents' decoder contributions and the decoder bias,
/// so latent_set(all latents) equals recon_chat + (h_base - recon_base)
/// exactly; None stays h_base verbatim.
Matrix approximate(const CrosscoderParams& params, const PairedActivationBatch& batch,
                   const PatchSpec& spec);

/// sum_i p_i ln(p_i/q_i) with 0 ln 0 = 0; infinity when q vanishes where
/// p > 0. Both inputs must sum to 1 within 1e-9.
double kl_divergence(const Vector& p, const Vector& q);

/// Each batch is treated as one token sequence: row i is position i+1.
std::vector<PatchResult> run_patch_experiment(const PlantedWorld& world,
                                              const CrosscoderParams& params,
                                              const std::vector<PairedActivationBatch>& batches,
                                              const std::vector<PatchSpec>& specs);

/// Non-dead latents sorted by delta_norm descending (most chat-specific
/// first); used to build best/worst-half latent sets.
std::vector<int> latents_by_delta_norm(const CrosscoderParams& params);

}  // namespace xdiff
