#include "xdiff/latent_scaling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace xdiff {

double beta_closed_form(const Vector& f, const Vector& d, const Matrix& Y) {
    if (Y.rows() != f.size() || Y.cols() != d.size())
        throw DimensionError("beta_closed_form: shape mismatch");
    const double f2 = f.squaredNorm();
    const double d2 = d.squaredNorm();
    if (f2 <= 0.0 || d2 <= 0.0)
        throw NumericError("beta_closed_form: zero activation or decoder vector");
    return d.dot(Y.transpose() * f) / (f2 * d2);
}

Matrix scaling_targets(const CrosscoderParams& params, const PairedActivationBatch& batch, int j,
                       TargetKind kind, ModelSide model) {
    if (j < 0 || j >= params.D) throw ConfigError("scaling_targets: latent index out of range");
    const Matrix& h = model == ModelSide::Base ? batch.h_base : batch.h_chat;
    if (kind == TargetKind::Reconstruction) return h;

    const LatentCodes codes = inference_codes(params, batch);
    auto [recon_base, recon_chat] = decode(params, codes);
    const Matrix& recon = model == ModelSide::Base ? recon_base : recon_chat;
    const auto dec_row = model == ModelSide::Base ? params.dec_base.row(j) : params.dec_chat.row(j);
    // Leave-one-out residual: drop latent j from the reconstruction.
    return h - recon + codes.f.col(j) * dec_row;
}

namespace {

struct Accum {
    double num_r_base = 0.0, num_r_chat = 0.0, num_e_base = 0.0, num_e_chat = 0.0;
    double f2 = 0.0;
    long support = 0;
};

}  // namespace

std::vector<BetaQuadruple> latent_scaling_report(const CrosscoderParams& params,
                                                 const std::vector<PairedActivationBatch>& batches,
                                                 const std::vector<int>& latent_set) {
    for (int j : latent_set)
        if (j < 0 || j >= params.D)
            throw ConfigError("latent_scaling_report: latent index out of range");

    std::vector<Accum> acc(latent_set.size());
    for (const auto& batch : batches) {
        const LatentCodes codes = inference_codes(params, batch);
        auto [recon_base, recon_chat] = decode(params, codes);
        const Matrix eps_base = batch.h_base - recon_base;
        const Matrix eps_chat = batch.h_chat - recon_chat;
        // Projections of every target family onto all chat decoder rows.
        const Matrix proj_r_base = batch.h_base * params.dec_chat.transpose();
        const Matrix proj_r_chat = batch.h_chat * params.dec_chat.transpose();
        const Matrix proj_e_base = eps_base * params.dec_chat.transpose();
        const Matrix proj_e_chat = eps_chat * params.dec_chat.transpose();

        parallel_for(latent_set.size(), [&](std::size_t t) {
            const int j = latent_set[t];
            const Vector f = codes.f.col(j);
            Accum& a = acc[t];
            const double f2 = f.squaredNorm();
            a.f2 += f2;
            a.num_r_base += f.dot(proj_r_base.col(j));
            a.num_r_chat += f.dot(proj_r_chat.col(j));
            // Error targets are leave-one-out: add latent j's own contribution back.
            const double cb = params.dec_chat.row(j).dot(params.dec_base.row(j));
            const double cc = params.dec_chat.row(j).squaredNorm();
            a.num_e_base += f.dot(proj_e_base.col(j)) + f2 * cb;
            a.num_e_chat += f.dot(proj_e_chat.col(j)) + f2 * cc;
            for (Eigen::Index i = 0; i < f.size(); ++i)
                if (f[i] > 0.0) ++a.support;
        });
    }

    std::vector<BetaQuadruple> report(latent_set.size());
    for (std::size_t t = 0; t < latent_set.size(); ++t) {
        BetaQuadruple& q = report[t];
        const int j = latent_set[t];
        q.latent = j;
        const Accum& a = acc[t];
        const double d2 = params.dec_chat.row(j).squaredNorm();
        if (a.f2 <= 0.0 || d2 <= 0.0) {
            q.excluded = true;
            continue;
        }
        const double denom = a.f2 * d2;
        q.beta_r_base = a.num_r_base / denom;
        q.beta_r_chat = a.num_r_chat / denom;
        q.beta_eps_base = a.num_e_base / denom;
        q.beta_eps_chat = a.num_e_chat / denom;
        q.support = a.support;
        q.low_support_flag = a.support < 10;
        q.negative_base_flag = q.beta_r_base < 0.0 || q.beta_eps_base < 0.0;
        if (q.beta_r_chat != 0.0 && q.beta_eps_chat != 0.0) {
            q.nu_r = q.beta_r_base / q.beta_r_chat;
            q.nu_eps = q.beta_eps_base / q.beta_eps_chat;
        } else {
            q.ratio_undefined_flag = true;
            q.nu_r = std::numeric_limits<double>::quiet_NaN();
            q.nu_eps = std::numeric_limits<double>::quiet_NaN();
        }
    }
    return report;
}

double mse_improvement(const CrosscoderParams& params,
                       const std::vector<PairedActivationBatch>& batches, int j, ModelSide model,
                       TargetKind kind) {
    if (j < 0 || j >= params.D) throw ConfigError("mse_improvement: latent index out of range");
    const Vector d_chat = params.dec_chat.row(j).transpose();
    const Vector d_own =
        (model == ModelSide::Base ? params.dec_base.row(j) : params.dec_chat.row(j)).transpose();

    double y2 = 0.0, f_y_chat = 0.0, f_y_own = 0.0, f2 = 0.0;
    for (const auto& batch : batches) {
        const Matrix Y = scaling_targets(params, batch, j, kind, model);
        const LatentCodes codes = inference_codes(params, batch);
        const Vector f = codes.f.col(j);
        y2 += Y.squaredNorm();
        f_y_chat += f.dot(Y * d_chat);
        f_y_own += f.dot(Y * d_own);
        f2 += f.squaredNorm();
    }
    const double dc2 = d_chat.squaredNorm();
    if (f2 <= 0.0 || dc2 <= 0.0)
        throw NumericError("mse_improvement: latent never fires or has a zero chat decoder");
    const double beta = f_y_chat / (f2 * dc2);

    const double mse_original = y2 - 2.0 * f_y_own + f2 * d_own.squaredNorm();
    const double mse_scaled = y2 - 2.0 * beta * f_y_chat + beta * beta * f2 * dc2;
    if (mse_original <= 0.0) throw NumericError("mse_improvement: zero original MSE");
    return (mse_original - mse_scaled) / mse_original;
}

std::vector<int> rank_by_nu_sum(const std::vector<BetaQuadruple>& report) {
    std::vector<std::size_t> valid;
    for (std::size_t t = 0; t < report.size(); ++t)
        if (!report[t].excluded && !report[t].ratio_undefined_flag) valid.push_back(t);

    auto ranks_of = [&](auto key) {
        std::vector<std::size_t> order = valid;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double ka = key(report[a]);
            const double kb = key(report[b]);
            if (ka != kb) return ka < kb;
            return report[a].latent < report[b].latent;
        });
        std::vector<double> rank(report.size(), static_cast<double>(report.size()));
        for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<double>(r);
        return rank;
    };
    const auto rank_eps = ranks_of([](const BetaQuadruple& q) { return q.nu_eps; });
    const auto rank_r = ranks_of([](const BetaQuadruple& q) { return q.nu_r; });

    std::vector<std::size_t> order(report.size());
    for (std::size_t t = 0; t < report.size(); ++t) order[t] = t;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ka = rank_eps[a] + rank_r[a];
        const double kb = rank_eps[b] + rank_r[b];
        if (ka != kb) return ka < kb;
        return report[a].latent < report[b].latent;
    });
    std::vector<int> latents(report.size());
    for (std::size_t t = 0; t < report.size(); ++t) latents[t] = report[order[t]].latent;
    return latents;
}

}  // namespace xdiff
