#include "xdiff/diffing.hpp"

#include <algorithm>

namespace xdiff {

const char* to_string(LatentClass c) {
    switch (c) {
        case LatentClass::BaseOnly: return "base-only";
        case LatentClass::ChatOnly: return "chat-only";
        case LatentClass::Shared: return "shared";
        case LatentClass::Other: return "other";
        case LatentClass::Dead: return "dead";
    }
    return "?";
}

std::optional<double> delta_norm(const CrosscoderParams& params, int j) {
    const double nb = params.decoder_norm_base(j);
    const double nc = params.decoder_norm_chat(j);
    const double m = std::max(nb, nc);
    if (m < kDeadNormEps) return std::nullopt;
    return 0.5 * ((nc - nb) / m + 1.0);
}

namespace {

LatentClass band_of(double dn) {
    if (dn <= 0.1) return LatentClass::BaseOnly;
    if (dn >= 0.9) return LatentClass::ChatOnly;
    if (dn >= 0.4 && dn <= 0.6) return LatentClass::Shared;
    return LatentClass::Other;
}

}  // namespace

std::vector<LatentClassification> classify(const CrosscoderParams& params) {
    std::vector<LatentClassification> out(static_cast<std::size_t>(params.D));
    for (int j = 0; j < params.D; ++j) {
        LatentClassification& c = out[static_cast<std::size_t>(j)];
        c.latent = j;
        if (auto dn = delta_norm(params, j)) {
            c.delta_norm = *dn;
            c.cls = band_of(*dn);
        } else {
            c.cls = LatentClass::Dead;
        }
    }
    return out;
}

std::vector<LatentClassification> classify_with_freq(
    const CrosscoderParams& params, const std::vector<PairedActivationBatch>& batches) {
    std::vector<LatentClassification> out = classify(params);
    const Vector freq = frequency_stats(params, batches);
    for (int j = 0; j < params.D; ++j) {
        out[static_cast<std::size_t>(j)].freq = freq[j];
        if (freq[j] == 0.0) out[static_cast<std::size_t>(j)].cls = LatentClass::Dead;
    }
    return out;
}

std::vector<TwinPair> twin_pairs(const CrosscoderParams& params,
                                 const std::vector<LatentClassification>& classes,
                                 double threshold) {
    std::vector<int> chat_only, base_only;
    for (const auto& c : classes) {
        if (c.cls == LatentClass::ChatOnly) chat_only.push_back(c.latent);
        else if (c.cls == LatentClass::BaseOnly) base_only.push_back(c.latent);
    }
    std::vector<TwinPair> pairs;
    if (base_only.empty()) return pairs;
    for (int j : chat_only) {
        const Vector dc = params.dec_chat.row(j).transpose();
        const double ndc = dc.norm();
        if (ndc < kDeadNormEps) continue;
        double best_cos = -2.0;
        int best = -1;
        for (int b : base_only) {
            const Vector db = params.dec_base.row(b).transpose();
            const double ndb = db.norm();
            if (ndb < kDeadNormEps) continue;
            const double cos = dc.dot(db) / (ndc * ndb);
            if (cos > best_cos) {
                best_cos = cos;
                best = b;
            }
        }
        if (best >= 0 && best_cos > threshold) pairs.push_back({j, best, best_cos, 0.0});
    }
    return pairs;
}

std::optional<double> activation_divergence(
    const CrosscoderParams& params, int latent_i, int latent_j,
    const std::vector<PairedActivationBatch>& train_batches,
    const std::vector<PairedActivationBatch>& val_batches) {
    const Vector norm_sums = params.decoder_norm_sums();
    const double si = norm_sums[latent_i];
    const double sj = norm_sums[latent_j];

    double a_p = 0.0;  // max pair activation over the training data
    for (const auto& batch : train_batches) {
        const LatentCodes codes = inference_codes(params, batch);
        a_p = std::max(a_p, codes.f.col(latent_i).maxCoeff() * si);
        a_p = std::max(a_p, codes.f.col(latent_j).maxCoeff() * sj);
    }
    if (a_p <= 0.0) return std::nullopt;

    const double hi = 0.7 * a_p;
    const double lo = 0.3 * a_p;
    long single = 0;
    long high_union = 0;
    for (const auto& batch : val_batches) {
        const LatentCodes codes = inference_codes(params, batch);
        for (Eigen::Index r = 0; r < codes.f.rows(); ++r) {
            const double vi = codes.f(r, latent_i) * si;
            const double vj = codes.f(r, latent_j) * sj;
            const bool high_i = vi > hi;
            const bool high_j = vj > hi;
            if (high_i || high_j) ++high_union;
            if (high_i && vj < lo) ++single;
            if (high_j && vi < lo) ++single;
        }
    }
    if (high_union == 0) return std::nullopt;
    return static_cast<double>(single) / static_cast<double>(high_union);
}

Vector frequency_stats(const CrosscoderParams& params,
                       const std::vector<PairedActivationBatch>& batches) {
    Vector counts = Vector::Zero(params.D);
    long rows = 0;
    for (const auto& batch : batches) {
        const LatentCodes codes = inference_codes(params, batch);
        const Matrix active = codes.selected();
        for (Eigen::Index i = 0; i < active.rows(); ++i)
            for (Eigen::Index j = 0; j < active.cols(); ++j)
                if (active(i, j) > 0.0) counts[j] += 1.0;
        rows += batch.rows();
    }
    if (rows == 0) return counts;
    return counts / static_cast<double>(rows);
}

}  // namespace xdiff
