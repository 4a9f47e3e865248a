#include "xdiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace xdiff {

void TrainConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("train config: learning_rate must be positive");
    if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("train config: adam betas must lie in (0,1)");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (steps < 1) throw ConfigError("train config: steps must be >= 1");
    if (dead_window < 1) throw ConfigError("train config: dead_window must be >= 1");
    if (mu_warmup_steps < 0) throw ConfigError("train config: mu_warmup_steps must be >= 0");
    if (init_scale <= 0.0) throw ConfigError("train config: init_scale must be positive");
    if (variant.kind == VariantKind::BatchTopK) {
        if (variant.k < 1) throw ConfigError("train config: k must be >= 1");
        if (variant.k_aux < 0) throw ConfigError("train config: k_aux must be >= 0");
        if (variant.alpha < 0.0) throw ConfigError("train config: alpha must be >= 0");
    } else if (variant.mu < 0.0) {
        throw ConfigError("train config: mu must be >= 0");
    }
}

CrosscoderParams init_params(const TrainConfig& config, int d, int D) {
    if (D < 1 || d < 1) throw ConfigError("init_params: D and d must be >= 1");
    Rng rng = Rng::substream(config.seed, 0x1417ULL);
    CrosscoderParams p;
    p.D = D;
    p.d = d;
    p.enc_base = Matrix(D, d);
    for (int j = 0; j < D; ++j)
        for (int c = 0; c < d; ++c) p.enc_base(j, c) = config.init_scale * rng.normal();
    // Both models share the initial weights; decoders start as the encoder
    // transpose, i.e. row j of every matrix is the same vector.
    p.enc_chat = p.enc_base;
    p.dec_base = p.enc_base;
    p.dec_chat = p.enc_base;
    p.b_enc = Vector::Zero(D);
    p.b_dec_base = Vector::Zero(d);
    p.b_dec_chat = Vector::Zero(d);
    p.variant = config.variant;
    p.theta = std::nullopt;
    return p;
}

namespace {

struct StepInfo {
    LossBreakdown loss;
    // smallest positive selected scaled activation; NaN when none
    double theta_min = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::uint8_t> fired;  // latent fired/selected this step
    double l0 = 0.0;                  // active codes per sample on this batch
    double fve = 0.0;                 // batch fraction of variance explained
};

void check_block_finite(const Matrix& g, const char* name) {
    if (!g.allFinite())
        throw NumericError(std::string("gradients: non-finite gradient in block ") + name);
}

Gradients gradients_impl(const CrosscoderParams& params, const PairedActivationBatch& batch,
                         const BoolMatrix& main_mask, const BoolMatrix& aux_mask, StepInfo* info) {
    const double n = static_cast<double>(batch.rows());
    const double inv_n = 1.0 / n;
    const int D = params.D;

    Matrix pre = batch.h_base * params.enc_base.transpose() +
                 batch.h_chat * params.enc_chat.transpose();
    pre.rowwise() += params.b_enc.transpose();
    const Matrix f = pre.cwiseMax(0.0);
    const Matrix mask_d = main_mask.cast<double>().matrix();
    const Matrix f_sel = f.cwiseProduct(mask_d);

    Matrix recon_base = f_sel * params.dec_base;
    Matrix recon_chat = f_sel * params.dec_chat;
    recon_base.rowwise() += params.b_dec_base.transpose();
    recon_chat.rowwise() += params.b_dec_chat.transpose();
    const Matrix eps_base = batch.h_base - recon_base;
    const Matrix eps_chat = batch.h_chat - recon_chat;

    LossBreakdown loss;
    loss.recon_base = 0.5 * eps_base.squaredNorm() * inv_n;
    loss.recon_chat = 0.5 * eps_chat.squaredNorm() * inv_n;

    Gradients g;
    const bool has_aux = params.variant.kind == VariantKind::BatchTopK && aux_mask.any();
    const double alpha = params.variant.alpha;

    // dL/d eps accumulators (n x d); start with the main MSE term.
    Matrix dl_deps_base = eps_base * inv_n;
    Matrix dl_deps_chat = eps_chat * inv_n;
    Matrix f_aux;
    Matrix res_base, res_chat;  // eps - aux reconstruction
    if (has_aux) {
        f_aux = f.cwiseProduct(aux_mask.cast<double>().matrix());
        res_base = eps_base - f_aux * params.dec_base;
        res_chat = eps_chat - f_aux * params.dec_chat;
        loss.aux = (res_base.squaredNorm() + res_chat.squaredNorm()) * inv_n;
        dl_deps_base += (2.0 * alpha * inv_n) * res_base;
        dl_deps_chat += (2.0 * alpha * inv_n) * res_chat;
    }

    // Decoder blocks: main/aux reconstruction paths.
    g.dec_base = -f_sel.transpose() * dl_deps_base;
    g.dec_chat = -f_sel.transpose() * dl_deps_chat;
    if (has_aux) {
        g.dec_base -= (2.0 * alpha * inv_n) * (f_aux.transpose() * res_base);
        g.dec_chat -= (2.0 * alpha * inv_n) * (f_aux.transpose() * res_chat);
    }
    g.b_dec_base = -dl_deps_base.colwise().sum().transpose();
    g.b_dec_chat = -dl_deps_chat.colwise().sum().transpose();

    // Code gradient, masked per path (straight-through for the selections).
    Matrix g_f = (-(dl_deps_base * params.dec_base.transpose()) -
                  (dl_deps_chat * params.dec_chat.transpose()))
                     .cwiseProduct(mask_d);
    if (has_aux) {
        const Matrix g_aux = (-(2.0 * alpha * inv_n) *
                              (res_base * params.dec_base.transpose() +
                               res_chat * params.dec_chat.transpose()))
                                 .cwiseProduct(aux_mask.cast<double>().matrix());
        g_f += g_aux;
    }

    if (params.variant.kind == VariantKind::L1) {
        const double mu = params.variant.mu;
        const Vector norm_sums = params.decoder_norm_sums();
        loss.sparsity = mu * (f * norm_sums).sum() * inv_n;
        // d/d f of mu * f_j * (||db_j|| + ||dc_j||)
        g_f.array().rowwise() += (mu * inv_n) * norm_sums.transpose().array();
        // d/d dec_row of mu * sum_i f_ij * ||row||
        const Vector f_col_sums = f.colwise().sum();
        for (int j = 0; j < D; ++j) {
            const double nb = params.dec_base.row(j).norm();
            const double nc = params.dec_chat.row(j).norm();
            const double w = mu * inv_n * f_col_sums[j];
            if (nb > 0.0) g.dec_base.row(j) += (w / nb) * params.dec_base.row(j);
            if (nc > 0.0) g.dec_chat.row(j) += (w / nc) * params.dec_chat.row(j);
        }
        loss.total = loss.recon_base + loss.recon_chat + loss.sparsity;
    } else {
        loss.total = loss.recon_base + loss.recon_chat + alpha * loss.aux;
    }

    // Through the ReLU; subgradient at exactly zero is zero.
    const Matrix g_pre = g_f.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    g.enc_base = g_pre.transpose() * batch.h_base;
    g.enc_chat = g_pre.transpose() * batch.h_chat;
    g.b_enc = g_pre.colwise().sum().transpose();

    if (!std::isfinite(loss.total)) throw NumericError("gradients: non-finite loss");
    check_block_finite(g.enc_base, "enc_base");
    check_block_finite(g.enc_chat, "enc_chat");
    check_block_finite(g.dec_base, "dec_base");
    check_block_finite(g.dec_chat, "dec_chat");
    if (!g.b_enc.allFinite()) throw NumericError("gradients: non-finite gradient in block b_enc");
    if (!g.b_dec_base.allFinite() || !g.b_dec_chat.allFinite())
        throw NumericError("gradients: non-finite gradient in block b_dec");

    if (info) {
        info->loss = loss;
        long active = 0;
        for (Eigen::Index i = 0; i < f_sel.rows(); ++i)
            for (Eigen::Index j = 0; j < f_sel.cols(); ++j)
                if (f_sel(i, j) > 0.0) ++active;
        info->l0 = static_cast<double>(active) / n;
        const Matrix cb = batch.h_base.rowwise() - batch.h_base.colwise().mean();
        const Matrix cc = batch.h_chat.rowwise() - batch.h_chat.colwise().mean();
        const double var = cb.squaredNorm() + cc.squaredNorm();
        info->fve = var > 0.0
                        ? 1.0 - (eps_base.squaredNorm() + eps_chat.squaredNorm()) / var
                        : 0.0;
        info->fired.assign(static_cast<std::size_t>(D), 0);
        if (params.variant.kind == VariantKind::BatchTopK) {
            const Matrix v = scaled_activation(params, {f, main_mask});
            double vmin = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < f.rows(); ++i)
                for (Eigen::Index j = 0; j < f.cols(); ++j)
                    if (main_mask(i, j) && f(i, j) > 0.0) {
                        info->fired[static_cast<std::size_t>(j)] = 1;
                        vmin = std::min(vmin, v(i, j));
                    }
            if (std::isfinite(vmin)) info->theta_min = vmin;
        } else {
            for (Eigen::Index j = 0; j < f.cols(); ++j)
                for (Eigen::Index i = 0; i < f.rows(); ++i)
                    if (f(i, j) > 0.0) {
                        info->fired[static_cast<std::size_t>(j)] = 1;
                        break;
                    }
        }
    }
    return g;
}

BoolMatrix all_true_mask(Eigen::Index n, Eigen::Index D) {
    return BoolMatrix::Constant(n, D, true);
}

BoolMatrix empty_mask(Eigen::Index n, Eigen::Index D) {
    return BoolMatrix::Constant(n, D, false);
}

struct AdamState {
    Matrix m, v;
    explicit AdamState(Eigen::Index rows, Eigen::Index cols)
        : m(Matrix::Zero(rows, cols)), v(Matrix::Zero(rows, cols)) {}
};

template <typename Param, typename Grad>
void adam_update(Param&& param, AdamState& state, const Grad& grad, const TrainConfig& cfg,
                 long t) {
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad;
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    param.array() -= cfg.learning_rate * (state.m.array() / c1) /
                     ((state.v.array() / c2).sqrt() + cfg.adam_eps);
}

}  // namespace

Gradients gradients(const CrosscoderParams& params, const PairedActivationBatch& batch,
                    const std::vector<bool>& dead_mask, LossBreakdown* loss_out) {
    params.check_finite();
    const Eigen::Index n = batch.rows();
    StepInfo info;
    Gradients g;
    if (params.variant.kind == VariantKind::L1) {
        g = gradients_impl(params, batch, all_true_mask(n, params.D), empty_mask(n, params.D),
                           &info);
    } else {
        if (dead_mask.size() != static_cast<std::size_t>(params.D))
            throw DimensionError("gradients: dead_mask size mismatch");
        LatentCodes codes = encode(params, batch);
        const Matrix v = scaled_activation(params, codes);
        const BoolMatrix main_mask = batch_topk_select(v, params.variant.k);
        const BoolMatrix aux_mask = aux_select(v, params.variant.k_aux, dead_mask);
        g = gradients_impl(params, batch, main_mask, aux_mask, &info);
    }
    if (loss_out) *loss_out = info.loss;
    return g;
}

std::pair<CrosscoderParams, TrainStats> train(const BatchSource& stream, int d,
                                              const TrainConfig& config) {
    config.validate();
    const int D = config.resolve_dict_size(d);
    if (config.variant.kind == VariantKind::BatchTopK && config.variant.k > D)
        throw ConfigError("train: k exceeds dictionary size");

    CrosscoderParams params = init_params(config, d, D);
    TrainStats stats;
    stats.loss_history.reserve(static_cast<std::size_t>(config.steps));

    AdamState s_enc_base(D, d), s_enc_chat(D, d), s_dec_base(D, d), s_dec_chat(D, d);
    AdamState s_b_enc(D, 1), s_b_dec_base(d, 1), s_b_dec_chat(d, 1);

    std::vector<long> steps_since_fire(static_cast<std::size_t>(D), 0);
    std::vector<bool> dead_mask(static_cast<std::size_t>(D), false);

    const long theta_from = config.steps - std::max(1, config.steps / 10);
    double theta_sum = 0.0;
    long theta_count = 0;

    const double mu_full = config.variant.mu;
    for (long step = 0; step < config.steps; ++step) {
        PairedActivationBatch batch = stream(static_cast<std::uint64_t>(step));
        if (batch.dim() != d) throw DimensionError("train: stream batch dimension changed");

        StepInfo info;
        Gradients g;
        try {
            if (params.variant.kind == VariantKind::L1) {
                if (config.mu_warmup_steps > 0)
                    params.variant.mu =
                        mu_full * std::min(1.0, static_cast<double>(step + 1) /
                                                    static_cast<double>(config.mu_warmup_steps));
                g = gradients_impl(params, batch, all_true_mask(batch.rows(), D),
                                   empty_mask(batch.rows(), D), &info);
            } else {
                LatentCodes codes = encode(params, batch);
                const Matrix v = scaled_activation(params, codes);
                const BoolMatrix main_mask = batch_topk_select(v, params.variant.k);
                const BoolMatrix aux_mask = aux_select(v, params.variant.k_aux, dead_mask);
                g = gradients_impl(params, batch, main_mask, aux_mask, &info);
            }
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (training step " + std::to_string(step) +
                               ")");
        }

        const long t = step + 1;
        adam_update(params.enc_base, s_enc_base, g.enc_base, config, t);
        adam_update(params.enc_chat, s_enc_chat, g.enc_chat, config, t);
        adam_update(params.dec_base, s_dec_base, g.dec_base, config, t);
        adam_update(params.dec_chat, s_dec_chat, g.dec_chat, config, t);
        adam_update(params.b_enc, s_b_enc, g.b_enc, config, t);
        adam_update(params.b_dec_base, s_b_dec_base, g.b_dec_base, config, t);
        adam_update(params.b_dec_chat, s_b_dec_chat, g.b_dec_chat, config, t);

        for (int j = 0; j < D; ++j) {
            if (info.fired[static_cast<std::size_t>(j)]) steps_since_fire[j] = 0;
            else ++steps_since_fire[j];
            dead_mask[static_cast<std::size_t>(j)] = steps_since_fire[j] >= config.dead_window;
        }

        if (params.variant.kind == VariantKind::BatchTopK && step >= theta_from &&
            std::isfinite(info.theta_min)) {
            theta_sum += info.theta_min;
            ++theta_count;
        }
        stats.loss_history.push_back(info.loss);
        stats.l0_history.push_back(info.l0);
        stats.fve_history.push_back(info.fve);
        stats.dead_history.push_back(
            static_cast<double>(std::count(dead_mask.begin(), dead_mask.end(), true)) /
            static_cast<double>(D));
    }

    params.variant.mu = mu_full;
    if (params.variant.kind == VariantKind::BatchTopK) {
        if (theta_count == 0)
            throw NumericError("train: theta calibration found no positive selected activations");
        params.theta = theta_sum / static_cast<double>(theta_count);
    }

    stats.dead_fraction =
        static_cast<double>(std::count(dead_mask.begin(), dead_mask.end(), true)) /
        static_cast<double>(D);
    return {std::move(params), std::move(stats)};
}

std::pair<CrosscoderParams, TrainStats> train(const PlantedWorld& world,
                                              const TrainConfig& config) {
    BatchSource stream = [&world, &config](std::uint64_t step) {
        return sample_batch(world, config.batch_size, step);
    };
    auto [params, stats] = train(stream, world.d, config);
    const TrainStats held = compute_stats(params, held_out_batches(world, 8, config.batch_size));
    stats.fve_base = held.fve_base;
    stats.fve_chat = held.fve_chat;
    stats.fve_total = held.fve_total;
    stats.l0_mean = held.l0_mean;
    stats.dead_fraction = held.dead_fraction;
    return {std::move(params), std::move(stats)};
}

std::vector<PairedActivationBatch> held_out_batches(const PlantedWorld& world, int n_batches,
                                                    int batch_size) {
    std::vector<PairedActivationBatch> batches;
    batches.reserve(static_cast<std::size_t>(n_batches));
    for (int i = 0; i < n_batches; ++i)
        batches.push_back(sample_batch(world, batch_size, kHeldOutStreamBase + i));
    return batches;
}

TrainStats compute_stats(const CrosscoderParams& params,
                         const std::vector<PairedActivationBatch>& held_out) {
    if (held_out.empty()) throw ConfigError("compute_stats: empty held-out set");
    TrainStats stats;

    long total_rows = 0;
    Vector mean_base = Vector::Zero(params.d);
    Vector mean_chat = Vector::Zero(params.d);
    for (const auto& batch : held_out) {
        mean_base += batch.h_base.colwise().sum().transpose();
        mean_chat += batch.h_chat.colwise().sum().transpose();
        total_rows += batch.rows();
    }
    mean_base /= static_cast<double>(total_rows);
    mean_chat /= static_cast<double>(total_rows);

    double err_base = 0.0, err_chat = 0.0, var_base = 0.0, var_chat = 0.0;
    double l0_sum = 0.0;
    std::vector<bool> ever_fired(static_cast<std::size_t>(params.D), false);
    for (const auto& batch : held_out) {
        LatentCodes codes = inference_codes(params, batch);
        auto [recon_base, recon_chat] = decode(params, codes);
        err_base += (batch.h_base - recon_base).squaredNorm();
        err_chat += (batch.h_chat - recon_chat).squaredNorm();
        var_base += (batch.h_base.rowwise() - mean_base.transpose()).squaredNorm();
        var_chat += (batch.h_chat.rowwise() - mean_chat.transpose()).squaredNorm();
        const Matrix active = codes.selected();
        for (Eigen::Index i = 0; i < active.rows(); ++i)
            for (Eigen::Index j = 0; j < active.cols(); ++j)
                if (active(i, j) > 0.0) {
                    l0_sum += 1.0;
                    ever_fired[static_cast<std::size_t>(j)] = true;
                }
    }
    // Raw (unclamped) fractions of variance explained.
    stats.fve_base = var_base > 0.0 ? 1.0 - err_base / var_base : 0.0;
    stats.fve_chat = var_chat > 0.0 ? 1.0 - err_chat / var_chat : 0.0;
    const double var_total = var_base + var_chat;
    stats.fve_total = var_total > 0.0 ? 1.0 - (err_base + err_chat) / var_total : 0.0;
    stats.l0_mean = l0_sum / static_cast<double>(total_rows);
    stats.dead_fraction =
        static_cast<double>(std::count(ever_fired.begin(), ever_fired.end(), false)) /
        static_cast<double>(params.D);
    return stats;
}

}  // namespace xdiff
