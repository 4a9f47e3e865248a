#include "xdiff/patching.hpp"

#include "xdiff/diffing.hpp"

#include <algorithm>
#include <limits>

namespace xdiff {

PatchSpec PatchSpec::latent_set(std::vector<int> s, std::string label) {
    PatchSpec spec;
    spec.mode = PatchMode::LatentSet;
    spec.latents = std::move(s);
    spec.label = std::move(label);
    return spec;
}

void PatchSpec::validate(int D) const {
    if (mode == PatchMode::LatentSet) {
        if (latents.empty()) throw ConfigError("patch spec: latent_set requires a nonempty set");
        for (int j : latents)
            if (j < 0 || j >= D) throw ConfigError("patch spec: invalid latent index");
    } else if (!latents.empty()) {
        throw ConfigError("patch spec: latent indices only belong to latent_set mode");
    }
}

Matrix approximate(const CrosscoderParams& params, const PairedActivationBatch& batch,
                   const PatchSpec& spec) {
    spec.validate(params.D);
    switch (spec.mode) {
        case PatchMode::None:
            return batch.h_base;
        case PatchMode::Template: {
            if (batch.template_mask.size() != static_cast<std::size_t>(batch.rows()))
                throw DimensionError("approximate: batch lacks a template mask");
            Matrix h = batch.h_base;
            for (Eigen::Index i = 0; i < batch.rows(); ++i)
                if (batch.template_mask[static_cast<std::size_t>(i)]) h.row(i) = batch.h_chat.row(i);
            return h;
        }
        case PatchMode::All: {
            const LatentCodes codes = inference_codes(params, batch);
            auto [recon_base, recon_chat] = decode(params, codes);
            // Chat reconstruction plus the base error.
            return recon_chat + (batch.h_base - recon_base);
        }
        case PatchMode::Error: {
            const LatentCodes codes = inference_codes(params, batch);
            auto [recon_base, recon_chat] = decode(params, codes);
            // Base reconstruction plus the chat error.
            return recon_base + (batch.h_chat - recon_chat);
        }
        case PatchMode::LatentSet: {
            const LatentCodes codes = inference_codes(params, batch);
            Matrix h = batch.h_base;
            for (int j : spec.latents) {
                const Vector f = codes.f.col(j);
                h += f * (params.dec_chat.row(j) - params.dec_base.row(j));
            }
            // The swap covers the decoder bias as well, so patching every
            // latent reproduces recon_chat + eps_base exactly.
            h.rowwise() += (params.b_dec_chat - params.b_dec_base).transpose();
            return h;
        }
    }
    throw ConfigError("approximate: unknown patch mode");
}

double kl_divergence(const Vector& p, const Vector& q) {
    if (p.size() != q.size()) throw DimensionError("kl_divergence: size mismatch");
    if (std::abs(p.sum() - 1.0) > 1e-9 || std::abs(q.sum() - 1.0) > 1e-9)
        throw NumericError("kl_divergence: inputs must sum to 1");
    double kl = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw NumericError("kl_divergence: negative probability");
        if (p[i] == 0.0) continue;  // 0 ln 0 = 0
        if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(kl, 0.0);
}

std::vector<PatchResult> run_patch_experiment(const PlantedWorld& world,
                                              const CrosscoderParams& params,
                                              const std::vector<PairedActivationBatch>& batches,
                                              const std::vector<PatchSpec>& specs) {
    if (batches.empty()) throw ConfigError("run_patch_experiment: empty batch list");
    std::vector<PatchResult> results;
    results.reserve(specs.size());
    for (const auto& spec : specs) {
        PatchResult res;
        res.label = spec.label;
        double sum_all = 0.0;
        double sum_first9 = 0.0;
        long count_first9 = 0;
        for (const auto& batch : batches) {
            const Matrix h_a = approximate(params, batch, spec);
            for (Eigen::Index i = 0; i < batch.rows(); ++i) {
                const Vector p = toy_forward(world.readout_chat, h_a.row(i).transpose());
                const Vector q = toy_forward(world.readout_chat, batch.h_chat.row(i).transpose());
                const double kl = kl_divergence(p, q);
                res.kl_per_position.push_back(kl);
                sum_all += kl;
                // Position i+1 within the sequence; the first-9 window is
                // positions 2..10 (the very first position is excluded).
                if (i >= 1 && i <= 9) {
                    sum_first9 += kl;
                    ++count_first9;
                }
            }
        }
        res.n_positions = static_cast<long>(res.kl_per_position.size());
        res.kl_mean_all = sum_all / static_cast<double>(res.n_positions);
        res.kl_mean_first9 =
            count_first9 > 0 ? sum_first9 / static_cast<double>(count_first9) : 0.0;
        results.push_back(std::move(res));
    }
    return results;
}

std::vector<int> latents_by_delta_norm(const CrosscoderParams& params) {
    std::vector<std::pair<double, int>> scored;
    for (int j = 0; j < params.D; ++j)
        if (auto dn = delta_norm(params, j)) scored.emplace_back(*dn, j);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<int> out(scored.size());
    for (std::size_t t = 0; t < scored.size(); ++t) out[t] = scored[t].second;
    return out;
}

}  // namespace xdiff
