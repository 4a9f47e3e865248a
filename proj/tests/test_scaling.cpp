#include "xdiff/latent_scaling.hpp"

#include "xdiff/diffing.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace xdiff;

namespace {

Matrix outer(const Vector& f, const Vector& d) { return f * d.transpose(); }

// A world with one planted latent plus a crosscoder that encodes its code
// exactly; decoders are configurable.
struct SingleLatentSetup {
    PlantedWorld world;
    CrosscoderParams params;
};

SingleLatentSetup single_latent(double scale_base, double scale_chat, double dec_base_scale,
                                double dec_chat_scale, double noise_sigma = 0.0) {
    WorldConfig wc;
    wc.d = 8;
    wc.vocab = 2;
    wc.n_shared = 1;
    wc.fire_prob = 0.5;
    wc.scale_base = scale_base;
    wc.scale_chat = scale_chat;
    wc.noise_sigma = noise_sigma;
    wc.seed = 13;
    SingleLatentSetup s{generate_world(wc), {}};
    const Vector dir = s.world.latents[0].direction_base;

    auto& p = s.params;
    p.D = 1;
    p.d = 8;
    // The encoder recovers the planted code exactly at zero noise:
    // pre = (sb^2 + sc^2) / (sb^2 + sc^2) * code.
    const double s2 = scale_base * scale_base + scale_chat * scale_chat;
    p.enc_base = (scale_base / s2) * dir.transpose();
    p.enc_chat = (scale_chat / s2) * dir.transpose();
    p.b_enc = Vector::Zero(1);
    p.dec_base = dec_base_scale * dir.transpose();
    p.dec_chat = dec_chat_scale * dir.transpose();
    p.b_dec_base = Vector::Zero(8);
    p.b_dec_chat = Vector::Zero(8);
    p.variant = Variant::l1(0.04);
    return s;
}

}  // namespace

TEST_CASE("beta closed form hand values") {
    Vector f(2), d(2);
    f << 1, 1;
    d << 1, 0;
    Matrix Y(2, 2);
    Y << 1, 0, 3, 0;
    CHECK(beta_closed_form(f, d, Y) == doctest::Approx(2.0));

    Rng rng(71);
    Vector rf(5), rd(3);
    for (int i = 0; i < 5; ++i) rf[i] = rng.exponential();
    for (int i = 0; i < 3; ++i) rd[i] = rng.normal();
    CHECK(beta_closed_form(rf, rd, outer(rf, rd)) == doctest::Approx(1.0));
    CHECK(beta_closed_form(rf, rd, Matrix(2.0 * outer(rf, rd))) == doctest::Approx(2.0));

    CHECK_THROWS_AS(beta_closed_form(Vector::Zero(2), rd, Matrix::Zero(2, 3)), NumericError);
    CHECK_THROWS_AS(beta_closed_form(rf, Vector::Zero(3), Matrix::Zero(5, 3)), NumericError);
}

TEST_CASE("closed form agrees with a gradient-descent oracle") {
    Rng rng(73);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_u64() % 6);
        const int d = 1 + static_cast<int>(rng.next_u64() % 4);
        Vector f(n), dv(d);
        for (int i = 0; i < n; ++i) f[i] = rng.exponential() + 0.05;
        for (int i = 0; i < d; ++i) dv[i] = rng.normal() + 0.1;
        if (dv.norm() < 1e-3) dv[0] += 1.0;
        Matrix Y(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) Y(i, j) = 2.0 * rng.normal();
        const double closed = beta_closed_form(f, dv, Y);
        const double gd = oracle::scalar_regression_gd(f, dv, Y);
        CHECK(std::abs(closed - gd) <= 1e-6 * std::max(1.0, std::abs(closed)));
    }
}

TEST_CASE("fitted beta is a local minimum of the squared objective") {
    Rng rng(79);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 3;
        const int d = 3;
        Vector f(n), dv(d);
        for (int i = 0; i < n; ++i) f[i] = rng.exponential() + 0.1;
        for (int i = 0; i < d; ++i) dv[i] = rng.normal();
        if (dv.norm() < 1e-3) dv[0] = 1.0;
        Matrix Y(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) Y(i, j) = rng.normal();
        const double beta = beta_closed_form(f, dv, Y);
        auto objective = [&](double b) { return (b * outer(f, dv) - Y).squaredNorm(); };
        const double at = objective(beta);
        CHECK(objective(beta + 1e-3) >= at);
        CHECK(objective(beta - 1e-3) >= at);
    }
}

TEST_CASE("scaling targets: reconstruction is verbatim, error is leave-one-out") {
    auto s = single_latent(1.0, 1.0, 1.0, 1.0);
    const auto batch = sample_batch(s.world, 64);

    const Matrix yr = scaling_targets(s.params, batch, 0, TargetKind::Reconstruction,
                                      ModelSide::Base);
    CHECK((yr - batch.h_base).norm() == 0.0);

    // single-latent perfect model: error target equals the latent's own
    // contribution, so beta against its own decoder is exactly 1
    const Matrix ye = scaling_targets(s.params, batch, 0, TargetKind::Error, ModelSide::Chat);
    const LatentCodes codes = inference_codes(s.params, batch);
    const Vector f = codes.f.col(0);
    REQUIRE(f.norm() > 0.0);
    const Vector d_chat = s.params.dec_chat.row(0).transpose();
    CHECK(beta_closed_form(f, d_chat, ye) == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(scaling_targets(s.params, batch, 5, TargetKind::Error, ModelSide::Base),
                    ConfigError);
}

TEST_CASE("truly chat-specific latent: beta_eps_base = 0 and beta_eps_chat = 1 exactly") {
    // chat-only world (zero base scale), perfect crosscoder with zero base decoder
    auto s = single_latent(0.0, 1.0, 0.0, 1.0);
    const std::vector<PairedActivationBatch> batches = {sample_batch(s.world, 128)};
    const auto report = latent_scaling_report(s.params, batches, {0});
    REQUIRE(report.size() == 1);
    CHECK_FALSE(report[0].excluded);
    CHECK(report[0].beta_eps_base == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(report[0].beta_eps_chat == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report[0].nu_eps == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("shared latent with equal decoders: nu_r and nu_eps near 1") {
    auto s = single_latent(1.0, 1.0, 1.0, 1.0);
    const std::vector<PairedActivationBatch> batches = {sample_batch(s.world, 256)};
    const auto report = latent_scaling_report(s.params, batches, {0});
    REQUIRE(report.size() == 1);
    CHECK(report[0].nu_eps == doctest::Approx(1.0).epsilon(0.1));
    CHECK(report[0].nu_r == doctest::Approx(1.0).epsilon(0.1));
    CHECK(report[0].support > 10);
    CHECK_FALSE(report[0].low_support_flag);
}

TEST_CASE("report flags: never-firing and zero chat denominators") {
    auto s = single_latent(1.0, 1.0, 1.0, 1.0);
    auto batch = sample_batch(s.world, 32);
    // silence the latent
    batch.h_base.setZero();
    batch.h_chat.setZero();
    const auto report = latent_scaling_report(s.params, {batch}, {0});
    CHECK(report[0].excluded);

    // zero chat decoder makes every fit undefined -> excluded as well
    auto zero_dec = single_latent(1.0, 1.0, 1.0, 0.0);
    const auto batch2 = sample_batch(zero_dec.world, 32);
    const auto rep2 = latent_scaling_report(zero_dec.params, {batch2}, {0});
    CHECK(rep2[0].excluded);
}

TEST_CASE("negative base beta raised on anti-correlated content") {
    auto s = single_latent(1.0, 1.0, 1.0, 1.0);
    auto batch = sample_batch(s.world, 64);
    batch.h_base = -batch.h_base;  // base content now opposes the chat decoder
    const auto report = latent_scaling_report(s.params, {batch}, {0});
    if (!report[0].excluded) CHECK(report[0].negative_base_flag);
}

TEST_CASE("mse improvement: irrelevant latent changes nothing, correct beta explains all") {
    // Complete-Shrinkage-style setup: latent lives in both models but the
    // crosscoder's base decoder is zero. The fitted base beta explains nearly
    // the whole base error.
    auto s = single_latent(0.5, 1.0, 0.0, 1.0, 0.01);
    const std::vector<PairedActivationBatch> batches = {sample_batch(s.world, 256)};
    const double improvement =
        mse_improvement(s.params, batches, 0, ModelSide::Base, TargetKind::Error);
    CHECK(improvement > 0.95);

    // own model where beta = 1 is already near-optimal: almost no change
    const double chat_improvement =
        mse_improvement(s.params, batches, 0, ModelSide::Chat, TargetKind::Error);
    CHECK(std::abs(chat_improvement) < 0.05);

    // irrelevant latent: base content orthogonal to the concept, fitted beta
    // near zero, so scaling barely moves the MSE
    auto junk = sample_batch(s.world, 256);
    Rng rng(83);
    for (Eigen::Index i = 0; i < junk.h_base.rows(); ++i)
        for (int c = 0; c < 8; ++c) junk.h_base(i, c) = 0.3 * rng.normal();
    const double irrelevant =
        mse_improvement(s.params, {junk}, 0, ModelSide::Base, TargetKind::Error);
    CHECK(std::abs(irrelevant) < 0.1);

    // a latent that never fires cannot be scored
    auto silent = sample_batch(s.world, 16);
    silent.h_base.setZero();
    silent.h_chat.setZero();
    CHECK_THROWS_AS(mse_improvement(s.params, {silent}, 0, ModelSide::Base, TargetKind::Error),
                    NumericError);
}

TEST_CASE("rank_by_nu_sum orders chat-specific latents first") {
    std::vector<BetaQuadruple> report(3);
    report[0].latent = 10;
    report[0].nu_r = 0.9;
    report[0].nu_eps = 0.8;
    report[1].latent = 11;
    report[1].nu_r = 0.1;
    report[1].nu_eps = 0.05;
    report[2].latent = 12;
    report[2].nu_r = 0.5;
    report[2].nu_eps = 0.4;
    const auto order = rank_by_nu_sum(report);
    REQUIRE(order.size() == 3);
    CHECK(order[0] == 11);
    CHECK(order[1] == 12);
    CHECK(order[2] == 10);
}

TEST_CASE("latent scaling flags an induced complete shrinkage") {
    // An asymmetric shared latent (base scale 0.3x) trained with a strong L1
    // penalty: the base decoder collapses so delta_norm calls it chat-only,
    // but the error betas still see the base-side content. The L0-matched
    // BatchTopK run keeps a faithful base decoder instead.
    WorldConfig wc;
    wc.d = 16;
    wc.vocab = 4;
    wc.n_shared = 1;
    wc.scale_base = 0.3;
    wc.scale_chat = 1.0;
    wc.fire_prob = 1.0;
    wc.noise_sigma = 0.005;
    wc.seed = 2000;
    const PlantedWorld world = generate_world(wc);
    const Vector dir = world.latents[0].direction_chat;
    const auto held = held_out_batches(world, 4, 256);

    auto concept_latent = [&](const CrosscoderParams& params) {
        double best_cos = 0.0;
        int best = 0;
        for (int j = 0; j < params.D; ++j) {
            const double n = params.dec_chat.row(j).norm();
            if (n < 1e-9) continue;
            const double c = std::abs(params.dec_chat.row(j).dot(dir)) / n;
            if (c > best_cos) {
                best_cos = c;
                best = j;
            }
        }
        return best;
    };

    TrainConfig cfg;
    cfg.variant = Variant::l1(0.8);
    cfg.mu_warmup_steps = 1000;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 64;
    cfg.steps = 6000;
    cfg.dict_size = 4;
    cfg.seed = 1;
    auto [l1p, l1s] = train(world, cfg);
    const int j = concept_latent(l1p);
    const auto dn = delta_norm(l1p, j);
    REQUIRE(dn.has_value());
    CHECK(*dn > 0.9);  // shrinkage misclassifies the latent as chat-only
    const auto rep = latent_scaling_report(l1p, held, {j});
    CHECK(rep[0].nu_eps > 0.2);  // ...but latent scaling flags it

    TrainConfig tc = cfg;
    tc.variant = Variant::batch_topk(1, 4);
    tc.mu_warmup_steps = 0;
    auto [tp, ts] = train(world, tc);
    const int tj = concept_latent(tp);
    const auto tdn = delta_norm(tp, tj);
    REQUIRE(tdn.has_value());
    CHECK(*tdn < 0.9);  // faithful decoders stay out of the chat-only band
}
