#include "xdiff/diffing.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace xdiff;

namespace {

CrosscoderParams params_with_norms(const std::vector<std::pair<double, double>>& norms) {
    const int D = static_cast<int>(norms.size());
    CrosscoderParams p;
    p.D = D;
    p.d = 2;
    p.enc_base = Matrix::Zero(D, 2);
    p.enc_chat = Matrix::Zero(D, 2);
    p.b_enc = Vector::Zero(D);
    p.dec_base = Matrix::Zero(D, 2);
    p.dec_chat = Matrix::Zero(D, 2);
    p.b_dec_base = Vector::Zero(2);
    p.b_dec_chat = Vector::Zero(2);
    for (int j = 0; j < D; ++j) {
        p.dec_base(j, 0) = norms[static_cast<std::size_t>(j)].first;
        p.dec_chat(j, 1) = norms[static_cast<std::size_t>(j)].second;
    }
    p.variant = Variant::l1(0.04);
    return p;
}

}  // namespace

TEST_CASE("delta_norm hand values") {
    auto p = params_with_norms({{1, 1}, {0, 2}, {1, 2}, {0, 0}});
    CHECK(*delta_norm(p, 0) == doctest::Approx(0.5));
    CHECK(*delta_norm(p, 1) == doctest::Approx(1.0));
    CHECK(*delta_norm(p, 2) == doctest::Approx(0.75));
    CHECK_FALSE(delta_norm(p, 3).has_value());
}

TEST_CASE("delta_norm antisymmetry and scale invariance") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        CrosscoderParams p = params_with_norms({{rng.exponential(), rng.exponential()}});
        const double dn = *delta_norm(p, 0);
        CHECK(dn >= 0.0);
        CHECK(dn <= 1.0);

        CrosscoderParams swapped = p;
        std::swap(swapped.dec_base, swapped.dec_chat);
        CHECK(*delta_norm(swapped, 0) == doctest::Approx(1.0 - dn).epsilon(1e-12));

        CrosscoderParams scaled = p;
        const double c = 0.01 + 10.0 * rng.uniform();
        scaled.dec_base *= c;
        scaled.dec_chat *= c;
        CHECK(*delta_norm(scaled, 0) == doctest::Approx(dn).epsilon(1e-12));
    }
}

TEST_CASE("classification bands") {
    auto p = params_with_norms({{1, 1}, {1, 0.05}, {0.05, 1}, {0.3, 1.0}, {0, 0}});
    auto classes = classify(p);
    CHECK(classes[0].cls == LatentClass::Shared);     // 0.5
    CHECK(classes[1].cls == LatentClass::BaseOnly);   // 0.025
    CHECK(classes[2].cls == LatentClass::ChatOnly);   // 0.975
    CHECK(classes[3].cls == LatentClass::Other);      // 0.85
    CHECK(classes[3].delta_norm == doctest::Approx(0.85));
    CHECK(classes[4].cls == LatentClass::Dead);

    // all-equal decoders -> everything shared
    auto eq = params_with_norms({{2, 2}, {0.1, 0.1}});
    for (const auto& c : classify(eq)) CHECK(c.cls == LatentClass::Shared);
}

TEST_CASE("every non-dead latent lands in exactly one band") {
    Rng rng(57);
    for (int trial = 0; trial < 300; ++trial) {
        auto p = params_with_norms({{rng.exponential(), rng.exponential()}});
        auto classes = classify(p);
        const auto cls = classes[0].cls;
        CHECK(cls != LatentClass::Dead);
        const double dn = classes[0].delta_norm;
        const bool in_base = dn <= 0.1;
        const bool in_chat = dn >= 0.9;
        const bool in_shared = dn >= 0.4 && dn <= 0.6;
        const int hits = int(in_base) + int(in_chat) + int(in_shared);
        CHECK(hits <= 1);
        if (cls == LatentClass::Other) CHECK(hits == 0);
    }
}

TEST_CASE("twin pairs find the matching base-only latent") {
    // latent 0: chat-only with chat direction u; latent 1: base-only with the
    // same base direction; latent 2: base-only but orthogonal.
    CrosscoderParams p;
    p.D = 3;
    p.d = 3;
    p.enc_base = Matrix::Zero(3, 3);
    p.enc_chat = Matrix::Zero(3, 3);
    p.b_enc = Vector::Zero(3);
    p.dec_base = Matrix::Zero(3, 3);
    p.dec_chat = Matrix::Zero(3, 3);
    p.b_dec_base = Vector::Zero(3);
    p.b_dec_chat = Vector::Zero(3);
    p.variant = Variant::l1(0.04);
    p.dec_chat.row(0) << 0.6, 0.8, 0.0;
    p.dec_base.row(1) << 0.6, 0.8, 0.0;
    p.dec_base.row(2) << 0.0, 0.0, 1.0;

    auto classes = classify(p);
    auto pairs = twin_pairs(p, classes, 0.9);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].chat_latent == 0);
    CHECK(pairs[0].base_latent == 1);
    CHECK(pairs[0].cosine == doctest::Approx(1.0));

    CHECK(twin_pairs(p, classes, 1.01).empty());

    // no base-only latents -> empty
    CrosscoderParams only_chat = p;
    only_chat.dec_base.setZero();
    only_chat.dec_base(0, 0) = 0.0;
    auto cc = classify(only_chat);
    CHECK(twin_pairs(only_chat, cc).empty());
}

namespace {

// Identity-style params: codes equal the first D base coordinates, and every
// decoder row has norm sum 1 so scaled activations equal raw codes.
CrosscoderParams trace_params(int D, int d) {
    CrosscoderParams p;
    p.D = D;
    p.d = d;
    p.enc_base = Matrix::Identity(D, d);
    p.enc_chat = Matrix::Zero(D, d);
    p.b_enc = Vector::Zero(D);
    p.dec_base = 0.5 * Matrix::Identity(D, d);
    p.dec_chat = 0.5 * Matrix::Identity(D, d);
    p.b_dec_base = Vector::Zero(d);
    p.b_dec_chat = Vector::Zero(d);
    p.variant = Variant::l1(0.04);
    return p;
}

PairedActivationBatch trace_batch(const std::vector<double>& vi, const std::vector<double>& vj) {
    PairedActivationBatch b;
    const int n = static_cast<int>(vi.size());
    b.h_base = Matrix::Zero(n, 2);
    for (int i = 0; i < n; ++i) {
        b.h_base(i, 0) = vi[static_cast<std::size_t>(i)];
        b.h_base(i, 1) = vj[static_cast<std::size_t>(i)];
    }
    b.h_chat = Matrix::Zero(n, 2);
    b.template_mask.assign(static_cast<std::size_t>(n), 0);
    return b;
}

}  // namespace

TEST_CASE("activation divergence: limits and a hand-counted trace") {
    auto p = trace_params(2, 2);

    // identical traces never single-fire
    auto same = trace_batch({10, 8, 1}, {10, 8, 1});
    CHECK(*activation_divergence(p, 0, 1, {same}, {same}) == doctest::Approx(0.0));

    // disjoint high activations always single-fire
    auto disjoint = trace_batch({10, 0, 10}, {0, 10, 0});
    CHECK(*activation_divergence(p, 0, 1, {disjoint}, {disjoint}) == doctest::Approx(1.0));

    // i high-fires alone once out of two high events (j co-fires once at 0.4 A_p)
    auto train = trace_batch({10}, {0});
    auto val = trace_batch({10, 10}, {1, 4});
    CHECK(*activation_divergence(p, 0, 1, {train}, {val}) == doctest::Approx(0.5));

    // no high activation on validation -> undefined
    auto low = trace_batch({1, 2}, {1, 1});
    CHECK_FALSE(activation_divergence(p, 0, 1, {train}, {low}).has_value());
    // zero training activation -> undefined
    auto zero = trace_batch({0}, {0});
    CHECK_FALSE(activation_divergence(p, 0, 1, {zero}, {val}).has_value());
}

TEST_CASE("activation divergence equals brute-force enumeration on random traces") {
    Rng rng(61);
    auto p = trace_params(2, 2);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 20 + static_cast<int>(rng.next_u64() % 81);
        std::vector<double> vi(static_cast<std::size_t>(n)), vj(static_cast<std::size_t>(n));
        std::vector<double> ti(16), tj(16);
        auto draw = [&rng]() { return rng.bernoulli(0.4) ? 10.0 * rng.uniform() : 0.0; };
        for (auto& x : vi) x = draw();
        for (auto& x : vj) x = draw();
        for (auto& x : ti) x = draw();
        for (auto& x : tj) x = draw();
        const auto got =
            activation_divergence(p, 0, 1, {trace_batch(ti, tj)}, {trace_batch(vi, vj)});
        const auto want = oracle::divergence_from_traces(ti, tj, vi, vj);
        REQUIRE(got.has_value() == want.has_value());
        if (got) CHECK(*got == doctest::Approx(*want).epsilon(1e-12));
    }
}

TEST_CASE("frequency stats match ground-truth firing rates") {
    auto p = trace_params(2, 2);
    auto batch = trace_batch({1, 0, 2, 0}, {1, 1, 1, 1});
    const Vector freq = frequency_stats(p, {batch});
    CHECK(freq[0] == doctest::Approx(0.5));
    CHECK(freq[1] == doctest::Approx(1.0));

    auto off = trace_batch({0, 0}, {0, 0});
    const Vector zero = frequency_stats(p, {off});
    CHECK(zero[0] == 0.0);

    // classify_with_freq reclassifies silent latents as dead
    auto classes = classify_with_freq(p, {off});
    CHECK(classes[0].cls == LatentClass::Dead);
    CHECK(classes[1].cls == LatentClass::Dead);
}

TEST_CASE("a perfect crosscoder recovers a planted firing frequency") {
    WorldConfig wc;
    wc.d = 8;
    wc.vocab = 2;
    wc.n_shared = 1;
    wc.fire_prob = 0.3;
    wc.scale_base = 1.0;
    wc.scale_chat = 1.0;
    wc.noise_sigma = 0.0;
    wc.seed = 77;
    const PlantedWorld world = generate_world(wc);
    const Vector dir = world.latents[0].direction_base;

    CrosscoderParams p;
    p.D = 1;
    p.d = 8;
    p.enc_base = 0.5 * dir.transpose();
    p.enc_chat = 0.5 * dir.transpose();
    p.b_enc = Vector::Zero(1);
    p.dec_base = dir.transpose();
    p.dec_chat = dir.transpose();
    p.b_dec_base = Vector::Zero(8);
    p.b_dec_chat = Vector::Zero(8);
    p.variant = Variant::l1(0.04);

    const auto batch = sample_batch(world, 10000);
    const Vector freq = frequency_stats(p, {batch});
    CHECK(std::abs(freq[0] - 0.3) <= 0.05);
}
