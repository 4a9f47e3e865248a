#include "xdiff/io.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace xdiff;

namespace {

// Quantize to f32 so the weights file can represent the values exactly.
void quantize(CrosscoderParams& p) {
    auto q = [](Matrix& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                m(i, j) = static_cast<double>(static_cast<float>(m(i, j)));
    };
    q(p.enc_base);
    q(p.enc_chat);
    q(p.dec_base);
    q(p.dec_chat);
    Matrix v = p.b_enc;
    q(v);
    p.b_enc = v.col(0);
    v = p.b_dec_base;
    q(v);
    p.b_dec_base = v.col(0);
    v = p.b_dec_chat;
    q(v);
    p.b_dec_chat = v.col(0);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("weights round trip bit-exactly for both variants") {
    Rng rng(301);
    for (int variant = 0; variant < 2; ++variant) {
        auto inst = oracle::random_instance(
            rng, variant == 0 ? VariantKind::L1 : VariantKind::BatchTopK, 2, 3, 4, 2, 0);
        quantize(inst.params);
        if (variant == 1) inst.params.theta = 0.625;  // f64 round-trips verbatim

        const std::string path = "roundtrip.xcoder";
        save_params(path, inst.params);
        const CrosscoderParams loaded = load_params(path);

        CHECK(loaded.D == inst.params.D);
        CHECK(loaded.d == inst.params.d);
        CHECK((loaded.enc_base - inst.params.enc_base).norm() == 0.0);
        CHECK((loaded.enc_chat - inst.params.enc_chat).norm() == 0.0);
        CHECK((loaded.b_enc - inst.params.b_enc).norm() == 0.0);
        CHECK((loaded.dec_base - inst.params.dec_base).norm() == 0.0);
        CHECK((loaded.dec_chat - inst.params.dec_chat).norm() == 0.0);
        CHECK((loaded.b_dec_base - inst.params.b_dec_base).norm() == 0.0);
        CHECK((loaded.b_dec_chat - inst.params.b_dec_chat).norm() == 0.0);
        CHECK(loaded.variant.kind == inst.params.variant.kind);
        if (variant == 0) {
            CHECK(loaded.variant.mu == inst.params.variant.mu);
            CHECK_FALSE(loaded.theta.has_value());
        } else {
            CHECK(loaded.variant.k == inst.params.variant.k);
            CHECK(loaded.variant.k_aux == inst.params.variant.k_aux);
            CHECK(loaded.variant.alpha == inst.params.variant.alpha);
            CHECK(*loaded.theta == 0.625);
        }

        // save(load(file)) reproduces the file byte for byte
        const std::string again = "roundtrip2.xcoder";
        save_params(again, loaded);
        CHECK(slurp(path) == slurp(again));
        std::remove(path.c_str());
        std::remove(again.c_str());
    }
}

TEST_CASE("weights loading rejects corrupt files") {
    Rng rng(303);
    auto inst = oracle::random_instance(rng, VariantKind::L1, 2, 3, 4, 0, 0);
    const std::string path = "corrupt.xcoder";
    save_params(path, inst.params);

    // bad magic
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f);
        std::fputc('Y', f);
        std::fclose(f);
        CHECK_THROWS_AS(load_params(path), FormatError);
    }
    // truncation
    save_params(path, inst.params);
    {
        std::ifstream in(path, std::ios::binary | std::ios::ate);
        const long size = static_cast<long>(in.tellg());
        in.close();
        REQUIRE(truncate(path.c_str(), size - 5) == 0);
        CHECK_THROWS_AS(load_params(path), FormatError);
    }
    // trailing bytes, e.g. a file written with a larger dictionary
    save_params(path, inst.params);
    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        const float extra[4] = {1, 2, 3, 4};
        out.write(reinterpret_cast<const char*>(extra), sizeof(extra));
    }
    CHECK_THROWS_AS(load_params(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("key=value parsing with comments and overrides") {
    std::istringstream in(
        "# world\n"
        "d = 16\n"
        "shared=2   # trailing comment\n"
        "noise_sigma = 0.25\n"
        "\n"
        "steps = 50\n");
    KeyValueMap kv = parse_key_values(in);
    CHECK(kv.at("d") == "16");
    CHECK(kv.at("shared") == "2");
    CHECK(kv.at("steps") == "50");

    apply_overrides(kv, {"steps=75", "k=4"});
    CHECK(kv.at("steps") == "75");
    CHECK(kv.at("k") == "4");
    CHECK_THROWS_AS(apply_overrides(kv, {"nonsense"}), ConfigError);

    kv["vocab"] = "4";
    const WorldConfig wc = world_config_from_kv(kv);
    CHECK(wc.d == 16);
    CHECK(wc.n_shared == 2);
    CHECK(wc.noise_sigma == 0.25);

    kv["variant"] = "batchtopk";
    const TrainConfig tc = train_config_from_kv(kv);
    CHECK(tc.steps == 75);
    CHECK(tc.variant.k == 4);

    kv["lr"] = "banana";
    CHECK_THROWS_AS(train_config_from_kv(kv), ConfigError);
    kv["lr"] = "-1";
    CHECK_THROWS_AS(train_config_from_kv(kv), ConfigError);
}

TEST_CASE("csv reports are deterministic and parse back") {
    std::vector<LatentClassification> classes(3);
    classes[0] = {0, 0.5, LatentClass::Shared, 0.25};
    classes[1] = {1, 0.9537261239, LatentClass::ChatOnly, 1.0 / 3.0};
    classes[2] = {2, 0.0, LatentClass::Dead, 0.0};

    write_latents_csv("latents_a.csv", classes);
    write_latents_csv("latents_b.csv", classes);
    CHECK(slurp("latents_a.csv") == slurp("latents_b.csv"));

    // parse a row back and compare at 9-significant-digit precision
    std::ifstream in("latents_a.csv");
    std::string line;
    std::getline(in, line);  // header
    std::getline(in, line);
    std::getline(in, line);
    CHECK(line.find("chat-only") != std::string::npos);
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    const double parsed = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    CHECK(parsed == doctest::Approx(0.9537261239).epsilon(1e-9));

    std::remove("latents_a.csv");
    std::remove("latents_b.csv");

    // empty twin list -> header only
    write_twins_csv("twins_empty.csv", {});
    CHECK(slurp("twins_empty.csv") == "chat_id,base_id,cosine,divergence\n");
    std::remove("twins_empty.csv");
}

TEST_CASE("delta-norm histogram bins sum to the non-dead latent count") {
    Rng rng(307);
    std::vector<LatentClassification> classes;
    int alive = 0;
    for (int j = 0; j < 200; ++j) {
        LatentClassification c;
        c.latent = j;
        if (rng.bernoulli(0.1)) {
            c.cls = LatentClass::Dead;
        } else {
            c.delta_norm = rng.uniform();
            c.cls = LatentClass::Other;
            ++alive;
        }
        classes.push_back(c);
    }
    write_delta_norm_histogram_csv("hist.csv", classes, 20);
    std::ifstream in("hist.csv");
    std::string line;
    std::getline(in, line);
    long total = 0;
    int rows = 0;
    while (std::getline(in, line)) {
        total += std::stol(line.substr(line.rfind(',') + 1));
        ++rows;
    }
    CHECK(rows == 20);
    CHECK(total == alive);
    std::remove("hist.csv");
}

TEST_CASE("manifest hashing is stable and sensitive") {
    KeyValueMap a = {{"d", "16"}, {"seed", "7"}};
    KeyValueMap b = {{"seed", "7"}, {"d", "16"}};  // insertion order must not matter
    CHECK(config_hash(a) == config_hash(b));
    b["d"] = "17";
    CHECK(config_hash(a) != config_hash(b));

    write_manifest("manifest_a.json", a, 7);
    write_manifest("manifest_b.json", a, 7);
    CHECK(slurp("manifest_a.json") == slurp("manifest_b.json"));
    CHECK(slurp("manifest_a.json").find("XCODER01") != std::string::npos);
    std::remove("manifest_a.json");
    std::remove("manifest_b.json");
}

TEST_CASE("format_float uses 9 significant digits") {
    CHECK(format_float(0.5) == "0.5");
    CHECK(format_float(1.0 / 3.0) == "0.333333333");
    CHECK(format_float(123456789012.0) == "1.23456789e+11");
}
