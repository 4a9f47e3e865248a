#pragma once

#include "xdiff/crosscoder.hpp"
#include "xdiff/world.hpp"

#include <functional>

namespace xdiff {

struct TrainConfig {
    Variant variant;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 64;
    int steps = 1000;
    int dead_window = 500;  // steps without a firing before a latent counts as dead
    int mu_warmup_steps = 0;  // L1 only: ramp mu linearly from 0 over this many steps
    std::uint64_t seed = 0;
    double init_scale = 0.1;
    int dict_size = 0;      // 0: use expansion * d
    int expansion = 32;

    void validate() const;
    int resolve_dict_size(int d) const { return dict_size > 0 ? dict_size : expansion * d; }
};

struct TrainStats {
    double fve_base = 0.0;   // stored unclamped; may be negative early on
    double fve_chat = 0.0;
    double fve_total = 0.0;
    double l0_mean = 0.0;
    double dead_fraction = 0.0;
    std::vector<LossBreakdown> loss_history;
    // per-step training-batch statistics, aligned with loss_history
    std::vector<double> l0_history;
    std::vector<double> fve_history;
    std::vector<double> dead_history;
};

/// Parameter-shaped gradient bundle.
struct Gradients {
    Matrix enc_base, enc_chat;
    Vector b_enc;
    Matrix dec_base, dec_chat;
    Vector b_dec_base, b_dec_chat;
};

/// Encoder pairs start identical and decoders start as the transposed
/// encoder, so each latent's two sides are initialized equal.
CrosscoderParams init_params(const TrainConfig& config, int d, int D);

/// Analytic gradients of the active variant's loss. The BatchTopK selection
/// masks are held fixed (straight-through); ReLU subgradient at 0 is 0.
Gradients gradients(const CrosscoderParams& params, const PairedActivationBatch& batch,
                    const std::vector<bool>& dead_mask, LossBreakdown* loss_out = nullptr);

using BatchSource = std::function<PairedActivationBatch(std::uint64_t step)>;

std::pair<CrosscoderParams, TrainStats> train(const BatchSource& stream, int d,
                                              const TrainConfig& config);

/// Convenience wrapper: batches are drawn from the world, held-out stats from
/// stream indices the training loop never touches.
std::pair<CrosscoderParams, TrainStats> train(const PlantedWorld& world, const TrainConfig& config);

TrainStats compute_stats(const CrosscoderParams& params,
                         const std::vector<PairedActivationBatch>& held_out);

/// Stream index offset used for held-out evaluation batches.
constexpr std::uint64_t kHeldOutStreamBase = 1ULL << 32;

std::vector<PairedActivationBatch> held_out_batches(const PlantedWorld& world, int n_batches,
                                                    int batch_size);

}  // namespace xdiff
