#include "xdiff/crosscoder.hpp"

#include <algorithm>
#include <numeric>

namespace xdiff {

Vector CrosscoderParams::decoder_norm_sums() const {
    Vector sums(D);
    for (int j = 0; j < D; ++j) sums[j] = dec_base.row(j).norm() + dec_chat.row(j).norm();
    return sums;
}

void CrosscoderParams::check_finite() const {
    auto finite = [](const Matrix& m) { return m.allFinite(); };
    if (!finite(enc_base) || !finite(enc_chat) || !finite(dec_base) || !finite(dec_chat) ||
        !b_enc.allFinite() || !b_dec_base.allFinite() || !b_dec_chat.allFinite())
        throw NumericError("crosscoder parameters contain non-finite values");
}

namespace {

void check_dims(const CrosscoderParams& params, const PairedActivationBatch& batch) {
    if (batch.h_base.rows() != batch.h_chat.rows() || batch.h_base.cols() != batch.h_chat.cols())
        throw DimensionError("batch: base/chat shapes differ");
    if (batch.dim() != params.d) throw DimensionError("batch dimension does not match params.d");
}

}  // namespace

LatentCodes encode(const CrosscoderParams& params, const PairedActivationBatch& batch) {
    check_dims(params, batch);
    const Eigen::Index n = batch.rows();
    Matrix pre = batch.h_base * params.enc_base.transpose() +
                 batch.h_chat * params.enc_chat.transpose();
    pre.rowwise() += params.b_enc.transpose();
    LatentCodes codes;
    codes.f = pre.cwiseMax(0.0);
    codes.active = BoolMatrix::Constant(n, params.D, true);
    return codes;
}

Matrix scaled_activation(const CrosscoderParams& params, const LatentCodes& codes) {
    const Vector norm_sums = params.decoder_norm_sums();
    return codes.f.array().rowwise() * norm_sums.transpose().array();
}

BoolMatrix batch_topk_select(const Matrix& v, int k) {
    const Eigen::Index n = v.rows();
    const Eigen::Index D = v.cols();
    if (k > D) throw ConfigError("batch_topk_select: k exceeds dictionary size");
    if (k < 0) throw ConfigError("batch_topk_select: k must be nonnegative");

    struct Entry {
        double value;
        Eigen::Index i, j;
    };
    std::vector<Entry> entries;
    entries.reserve(static_cast<std::size_t>(n * D));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < D; ++j) entries.push_back({v(i, j), i, j});

    const std::size_t keep = static_cast<std::size_t>(n) * static_cast<std::size_t>(k);
    auto better = [](const Entry& a, const Entry& b) {
        if (a.value != b.value) return a.value > b.value;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    };
    if (keep < entries.size())
        std::nth_element(entries.begin(), entries.begin() + keep, entries.end(), better);

    BoolMatrix mask = BoolMatrix::Constant(n, D, false);
    for (std::size_t t = 0; t < keep && t < entries.size(); ++t)
        mask(entries[t].i, entries[t].j) = true;
    return mask;
}

std::pair<Matrix, Matrix> decode(const CrosscoderParams& params, const LatentCodes& codes) {
    if (codes.f.cols() != params.D) throw DimensionError("decode: codes/params dictionary mismatch");
    const Matrix f_sel = codes.selected();
    Matrix recon_base = f_sel * params.dec_base;
    Matrix recon_chat = f_sel * params.dec_chat;
    recon_base.rowwise() += params.b_dec_base.transpose();
    recon_chat.rowwise() += params.b_dec_chat.transpose();
    return {std::move(recon_base), std::move(recon_chat)};
}

LossBreakdown l1_loss(const CrosscoderParams& params, const PairedActivationBatch& batch) {
    if (params.variant.kind != VariantKind::L1)
        throw VariantError("l1_loss called on a non-L1 crosscoder");
    const double n = static_cast<double>(batch.rows());
    LatentCodes codes = encode(params, batch);
    auto [recon_base, recon_chat] = decode(params, codes);

    LossBreakdown loss;
    loss.recon_base = 0.5 * (batch.h_base - recon_base).squaredNorm() / n;
    loss.recon_chat = 0.5 * (batch.h_chat - recon_chat).squaredNorm() / n;
    const Vector norm_sums = params.decoder_norm_sums();
    loss.sparsity = params.variant.mu * (codes.f * norm_sums).sum() / n;
    loss.total = loss.recon_base + loss.recon_chat + loss.sparsity;
    if (!std::isfinite(loss.total)) throw NumericError("l1_loss: non-finite loss");
    return loss;
}

BoolMatrix aux_select(const Matrix& v, int k_aux, const std::vector<bool>& dead_mask) {
    const Eigen::Index n = v.rows();
    const Eigen::Index D = v.cols();
    BoolMatrix mask = BoolMatrix::Constant(n, D, false);
    std::vector<Eigen::Index> dead;
    for (Eigen::Index j = 0; j < D; ++j)
        if (dead_mask[static_cast<std::size_t>(j)]) dead.push_back(j);
    if (dead.empty() || k_aux <= 0) return mask;

    struct Entry {
        double value;
        Eigen::Index i, j;
    };
    std::vector<Entry> entries;
    entries.reserve(static_cast<std::size_t>(n) * dead.size());
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j : dead) entries.push_back({v(i, j), i, j});

    const std::size_t keep =
        std::min(entries.size(), static_cast<std::size_t>(n) * static_cast<std::size_t>(k_aux));
    auto better = [](const Entry& a, const Entry& b) {
        if (a.value != b.value) return a.value > b.value;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    };
    if (keep < entries.size())
        std::nth_element(entries.begin(), entries.begin() + keep, entries.end(), better);
    for (std::size_t t = 0; t < keep; ++t) mask(entries[t].i, entries[t].j) = true;
    return mask;
}

LossBreakdown batchtopk_loss_fixed_masks(const CrosscoderParams& params,
                                         const PairedActivationBatch& batch,
                                         const BoolMatrix& main_mask, const BoolMatrix& aux_mask) {
    const double n = static_cast<double>(batch.rows());
    LatentCodes codes = encode(params, batch);
    codes.active = main_mask;
    auto [recon_base, recon_chat] = decode(params, codes);
    const Matrix eps_base = batch.h_base - recon_base;
    const Matrix eps_chat = batch.h_chat - recon_chat;

    LossBreakdown loss;
    loss.recon_base = 0.5 * eps_base.squaredNorm() / n;
    loss.recon_chat = 0.5 * eps_chat.squaredNorm() / n;

    if (aux_mask.any()) {
        const Matrix f_aux = codes.f.cwiseProduct(aux_mask.cast<double>().matrix());
        // Residual reconstruction by dead latents; no decoder bias here.
        const Matrix aux_base = f_aux * params.dec_base;
        const Matrix aux_chat = f_aux * params.dec_chat;
        loss.aux = ((eps_base - aux_base).squaredNorm() + (eps_chat - aux_chat).squaredNorm()) / n;
    }
    loss.total = loss.recon_base + loss.recon_chat + params.variant.alpha * loss.aux;
    if (!std::isfinite(loss.total)) throw NumericError("batchtopk_loss: non-finite loss");
    return loss;
}

LossBreakdown batchtopk_loss(const CrosscoderParams& params, const PairedActivationBatch& batch,
                             const std::vector<bool>& dead_mask) {
    if (params.variant.kind != VariantKind::BatchTopK)
        throw VariantError("batchtopk_loss called on a non-BatchTopK crosscoder");
    if (dead_mask.size() != static_cast<std::size_t>(params.D))
        throw DimensionError("batchtopk_loss: dead_mask size mismatch");
    LatentCodes codes = encode(params, batch);
    const Matrix v = scaled_activation(params, codes);
    const BoolMatrix main_mask = batch_topk_select(v, params.variant.k);
    const BoolMatrix aux_mask = aux_select(v, params.variant.k_aux, dead_mask);
    return batchtopk_loss_fixed_masks(params, batch, main_mask, aux_mask);
}

double estimate_theta(const CrosscoderParams& params,
                      const std::vector<PairedActivationBatch>& batches) {
    if (params.variant.kind != VariantKind::BatchTopK)
        throw VariantError("estimate_theta requires the BatchTopK variant");
    double sum = 0.0;
    long counted = 0;
    for (const auto& batch : batches) {
        LatentCodes codes = encode(params, batch);
        const Matrix v = scaled_activation(params, codes);
        const BoolMatrix mask = batch_topk_select(v, params.variant.k);
        double batch_min = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < v.rows(); ++i)
            for (Eigen::Index j = 0; j < v.cols(); ++j)
                if (mask(i, j) && codes.f(i, j) > 0.0) batch_min = std::min(batch_min, v(i, j));
        if (std::isfinite(batch_min)) {
            sum += batch_min;
            ++counted;
        }
    }
    if (counted == 0)
        throw NumericError("estimate_theta: no batch produced a positive selected activation");
    return sum / static_cast<double>(counted);
}

LatentCodes encode_inference(const CrosscoderParams& params, const PairedActivationBatch& batch) {
    if (params.variant.kind != VariantKind::BatchTopK)
        throw VariantError("encode_inference requires the BatchTopK variant");
    if (!params.theta.has_value())
        throw StateError("encode_inference: theta not set; run estimate_theta first");
    LatentCodes codes = encode(params, batch);
    const Matrix v = scaled_activation(params, codes);
    codes.active = v.array() > *params.theta;
    codes.f = codes.selected();
    return codes;
}

LatentCodes inference_codes(const CrosscoderParams& params, const PairedActivationBatch& batch) {
    if (params.variant.kind == VariantKind::L1) return encode(params, batch);
    return encode_inference(params, batch);
}

std::pair<double, double> sparsity_penalties(const Vector& dec_base_j, const Vector& dec_chat_j,
                                             double f) {
    const double nb = dec_base_j.norm();
    const double nc = dec_chat_j.norm();
    const double crosscoder = f * (nb + nc);
    const double stacked = f * std::sqrt(nb * nb + nc * nc);
    return {crosscoder, stacked};
}

}  // namespace xdiff
