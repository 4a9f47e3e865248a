#pragma once

#include "xdiff/common.hpp"

#include <iosfwd>

namespace xdiff {

enum class PlantedClass { Shared, BaseOnly, ChatOnly, DecouplingProbe };

const char* to_string(PlantedClass c);

/// One ground-truth dictionary element of the synthetic world.
struct PlantedLatent {
    Vector direction_base;   // unit norm
    Vector direction_chat;   // unit norm
    PlantedClass cls = PlantedClass::Shared;
    double fire_prob = 0.1;
    double scale_base = 1.0;  // 0 for chat-only
    double scale_chat = 1.0;  // 0 for base-only
    // DecouplingProbe only: the concept fires with a shared component seen by
    // both models plus per-model exclusive components.
    double shared_fire_prob = 0.0;
    double base_excl_fire_prob = 0.0;
    double chat_excl_fire_prob = 0.0;
};

/// Affine map R^d -> R^V followed by softmax in toy_forward.
struct AffineReadout {
    Matrix W;  // V x d
    Vector b;  // V
};

struct WorldConfig {
    int d = 16;
    int vocab = 8;
    int n_shared = 0;
    int n_base_only = 0;
    int n_chat_only = 0;
    int n_decoupling_probe = 0;
    double fire_prob = 0.1;
    double scale_base = 1.0;
    double scale_chat = 1.0;
    double shared_fire_prob = 0.25;
    double base_excl_fire_prob = 0.25;
    double chat_excl_fire_prob = 0.25;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    int template_stride = 8;                // every template_stride-th sample is a template position
    double max_pairwise_cosine = 0.5;
};

struct PlantedWorld {
    std::vector<PlantedLatent> latents;
    int d = 0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    int template_stride = 8;
    AffineReadout readout_base;
    AffineReadout readout_chat;

    int n_latents() const { return static_cast<int>(latents.size()); }
    bool is_template_index(std::uint64_t global_index) const {
        return template_stride > 0 && global_index % static_cast<std::uint64_t>(template_stride) == 0;
    }
};

/// Aligned base/chat activation rows. Per-model ground-truth codes are kept
/// separately because decoupling-probe latents fire with different magnitudes
/// in each model; for all other classes the two matrices are identical.
struct PairedActivationBatch {
    Matrix h_base;  // n x d
    Matrix h_chat;  // n x d
    Matrix codes_base;  // n x L, empty when ground truth withheld
    Matrix codes_chat;  // n x L
    std::vector<std::uint8_t> template_mask;  // n flags

    Eigen::Index rows() const { return h_base.rows(); }
    Eigen::Index dim() const { return h_base.cols(); }
    bool has_codes() const { return codes_base.size() > 0; }
};

PlantedWorld generate_world(const WorldConfig& config);

/// Deterministic in (world.seed, stream): same arguments give bit-identical
/// batches. `stream` selects an independent batch in an unbounded sequence;
/// global sample indices (for the template mask) start at stream * n.
PairedActivationBatch sample_batch(const PlantedWorld& world, int n, std::uint64_t stream = 0);

Vector toy_forward(const AffineReadout& readout, const Vector& h);

/// Parses the flat key=value world config format.
WorldConfig parse_world_config(std::istream& in);
WorldConfig load_world_config(const std::string& path);

void save_batch(const std::string& path, const PairedActivationBatch& batch);
PairedActivationBatch load_batch(const std::string& path);

}  // namespace xdiff
