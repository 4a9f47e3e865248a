#include "xdiff/world.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace xdiff {

const char* to_string(PlantedClass c) {
    switch (c) {
        case PlantedClass::Shared: return "shared";
        case PlantedClass::BaseOnly: return "base-only";
        case PlantedClass::ChatOnly: return "chat-only";
        case PlantedClass::DecouplingProbe: return "decoupling-probe";
    }
    return "?";
}

namespace {

Vector random_unit_vector(Rng& rng, int d) {
    Vector v(d);
    for (int i = 0; i < d; ++i) v[i] = rng.normal();
    const double norm = v.norm();
    if (norm < 1e-12) return random_unit_vector(rng, d);
    return v / norm;
}

// Rejection-samples a unit vector with bounded |cosine| against the pool.
Vector sample_direction(Rng& rng, int d, const std::vector<Vector>& pool, double max_cos) {
    constexpr int kMaxAttempts = 20000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Vector v = random_unit_vector(rng, d);
        bool ok = true;
        for (const auto& u : pool) {
            if (std::abs(u.dot(v)) > max_cos) {
                ok = false;
                break;
            }
        }
        if (ok) return v;
    }
    throw ConfigError("generate_world: dimension too small to fit requested latent count "
                      "under the pairwise cosine cap");
}

AffineReadout sample_readout(Rng& rng, int vocab, int d) {
    AffineReadout r;
    for (int attempt = 0; attempt < 100; ++attempt) {
        r.W = Matrix(vocab, d);
        for (int i = 0; i < vocab; ++i)
            for (int j = 0; j < d; ++j) r.W(i, j) = rng.normal() / std::sqrt(static_cast<double>(d));
        r.b = Vector(vocab);
        for (int i = 0; i < vocab; ++i) r.b[i] = 0.1 * rng.normal();
        Eigen::JacobiSVD<Matrix> svd(r.W);
        if (svd.singularValues()[vocab - 1] > 1e-8) return r;
    }
    throw ConfigError("generate_world: could not sample a full-row-rank readout");
}

void validate(const WorldConfig& c) {
    if (c.d < 1) throw ConfigError("world config: d must be >= 1");
    if (c.vocab < 1 || c.vocab > c.d)
        throw ConfigError("world config: vocab must satisfy 1 <= vocab <= d");
    if (c.n_shared < 0 || c.n_base_only < 0 || c.n_chat_only < 0 || c.n_decoupling_probe < 0)
        throw ConfigError("world config: latent counts must be nonnegative");
    for (double p : {c.fire_prob, c.shared_fire_prob, c.base_excl_fire_prob, c.chat_excl_fire_prob})
        if (p < 0.0 || p > 1.0) throw ConfigError("world config: probabilities must be in [0,1]");
    if (c.scale_base < 0.0 || c.scale_chat < 0.0)
        throw ConfigError("world config: scales must be nonnegative");
    if (c.noise_sigma < 0.0) throw ConfigError("world config: noise_sigma must be nonnegative");
    if (c.max_pairwise_cosine <= 0.0 || c.max_pairwise_cosine > 1.0)
        throw ConfigError("world config: max_pairwise_cosine must be in (0,1]");
}

}  // namespace

PlantedWorld generate_world(const WorldConfig& config) {
    validate(config);
    PlantedWorld world;
    world.d = config.d;
    world.noise_sigma = config.noise_sigma;
    world.seed = config.seed;
    world.template_stride = config.template_stride;

    Rng rng = Rng::substream(config.seed, 0);
    std::vector<Vector> pool;

    auto add_latent = [&](PlantedClass cls) {
        PlantedLatent lat;
        lat.cls = cls;
        Vector dir = sample_direction(rng, config.d, pool, config.max_pairwise_cosine);
        pool.push_back(dir);
        lat.direction_base = dir;
        lat.direction_chat = dir;
        lat.fire_prob = config.fire_prob;
        switch (cls) {
            case PlantedClass::Shared:
                lat.scale_base = config.scale_base;
                lat.scale_chat = config.scale_chat;
                break;
            case PlantedClass::BaseOnly:
                lat.scale_base = config.scale_base;
                lat.scale_chat = 0.0;
                break;
            case PlantedClass::ChatOnly:
                lat.scale_base = 0.0;
                lat.scale_chat = config.scale_chat;
                break;
            case PlantedClass::DecouplingProbe:
                lat.scale_base = config.scale_base;
                lat.scale_chat = config.scale_chat;
                lat.fire_prob = 0.0;
                lat.shared_fire_prob = config.shared_fire_prob;
                lat.base_excl_fire_prob = config.base_excl_fire_prob;
                lat.chat_excl_fire_prob = config.chat_excl_fire_prob;
                break;
        }
        world.latents.push_back(std::move(lat));
    };

    for (int i = 0; i < config.n_shared; ++i) add_latent(PlantedClass::Shared);
    for (int i = 0; i < config.n_base_only; ++i) add_latent(PlantedClass::BaseOnly);
    for (int i = 0; i < config.n_chat_only; ++i) add_latent(PlantedClass::ChatOnly);
    for (int i = 0; i < config.n_decoupling_probe; ++i) add_latent(PlantedClass::DecouplingProbe);

    world.readout_base = sample_readout(rng, config.vocab, config.d);
    world.readout_chat = sample_readout(rng, config.vocab, config.d);
    return world;
}

PairedActivationBatch sample_batch(const PlantedWorld& world, int n, std::uint64_t stream) {
    if (n < 1) throw ConfigError("sample_batch: n must be >= 1");
    const int d = world.d;
    const int L = world.n_latents();

    PairedActivationBatch batch;
    batch.h_base = Matrix::Zero(n, d);
    batch.h_chat = Matrix::Zero(n, d);
    batch.codes_base = Matrix::Zero(n, L);
    batch.codes_chat = Matrix::Zero(n, L);
    batch.template_mask.resize(n);

    for (int i = 0; i < n; ++i) {
        const std::uint64_t global = stream * static_cast<std::uint64_t>(n) + i;
        Rng rng = Rng::substream(world.seed, global + 1);
        batch.template_mask[i] = world.is_template_index(global) ? 1 : 0;

        for (int j = 0; j < L; ++j) {
            const PlantedLatent& lat = world.latents[j];
            double code_base = 0.0;
            double code_chat = 0.0;
            if (lat.cls == PlantedClass::DecouplingProbe) {
                // One shared magnitude for both models, plus exclusives.
                if (rng.bernoulli(lat.shared_fire_prob)) {
                    const double m = rng.exponential();
                    code_base += m;
                    code_chat += m;
                }
                if (rng.bernoulli(lat.base_excl_fire_prob)) code_base += rng.exponential();
                if (rng.bernoulli(lat.chat_excl_fire_prob)) code_chat += rng.exponential();
            } else if (rng.bernoulli(lat.fire_prob)) {
                const double m = rng.exponential();
                code_base = m;
                code_chat = m;
            }
            if (code_base > 0.0) {
                batch.codes_base(i, j) = code_base;
                if (lat.scale_base > 0.0)
                    batch.h_base.row(i) += code_base * lat.scale_base * lat.direction_base.transpose();
            }
            if (code_chat > 0.0) {
                batch.codes_chat(i, j) = code_chat;
                if (lat.scale_chat > 0.0)
                    batch.h_chat.row(i) += code_chat * lat.scale_chat * lat.direction_chat.transpose();
            }
        }
        if (world.noise_sigma > 0.0) {
            for (int c = 0; c < d; ++c) batch.h_base(i, c) += world.noise_sigma * rng.normal();
            for (int c = 0; c < d; ++c) batch.h_chat(i, c) += world.noise_sigma * rng.normal();
        }
    }
    return batch;
}

Vector toy_forward(const AffineReadout& readout, const Vector& h) {
    if (readout.W.cols() != h.size())
        throw DimensionError("toy_forward: activation dimension mismatch");
    Vector logits = readout.W * h + readout.b;
    const double m = logits.maxCoeff();
    Vector p = (logits.array() - m).exp();
    p /= p.sum();
    return p;
}

WorldConfig parse_world_config(std::istream& in) {
    WorldConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) continue;
        try {
            if (key == "d") cfg.d = std::stoi(val);
            else if (key == "vocab") cfg.vocab = std::stoi(val);
            else if (key == "shared") cfg.n_shared = std::stoi(val);
            else if (key == "base_only") cfg.n_base_only = std::stoi(val);
            else if (key == "chat_only") cfg.n_chat_only = std::stoi(val);
            else if (key == "decoupling_probe") cfg.n_decoupling_probe = std::stoi(val);
            else if (key == "fire_prob") cfg.fire_prob = std::stod(val);
            else if (key == "scale_base") cfg.scale_base = std::stod(val);
            else if (key == "scale_chat") cfg.scale_chat = std::stod(val);
            else if (key == "shared_fire_prob") cfg.shared_fire_prob = std::stod(val);
            else if (key == "base_excl_fire_prob") cfg.base_excl_fire_prob = std::stod(val);
            else if (key == "chat_excl_fire_prob") cfg.chat_excl_fire_prob = std::stod(val);
            else if (key == "noise_sigma") cfg.noise_sigma = std::stod(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "template_stride") cfg.template_stride = std::stoi(val);
            else if (key == "max_pairwise_cosine") cfg.max_pairwise_cosine = std::stod(val);
            // other keys belong to the train config sharing the same file
        } catch (const std::exception&) {
            throw ConfigError("world config line " + std::to_string(lineno) + ": bad value for '" +
                              key + "'");
        }
    }
    validate(cfg);
    return cfg;
}

WorldConfig load_world_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open world config: " + path);
    return parse_world_config(in);
}

namespace {

constexpr char kBatchMagic[8] = {'X', 'D', 'I', 'F', 'F', 'A', 'C', 'T'};

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("batch file truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32_rowmajor(std::ostream& out, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const float f = static_cast<float>(m(i, j));
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
}

Matrix read_f32_rowmajor(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            float f;
            in.read(reinterpret_cast<char*>(&f), 4);
            if (!in) throw FormatError("batch file truncated");
            m(i, j) = static_cast<double>(f);
        }
    return m;
}

}  // namespace

void save_batch(const std::string& path, const PairedActivationBatch& batch) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kBatchMagic, 8);
    write_u32(out, static_cast<std::uint32_t>(batch.rows()));
    write_u32(out, static_cast<std::uint32_t>(batch.dim()));
    write_f32_rowmajor(out, batch.h_base);
    write_f32_rowmajor(out, batch.h_chat);
    for (Eigen::Index i = 0; i < batch.rows(); ++i) {
        const char flag = batch.template_mask.empty() ? 0 : static_cast<char>(batch.template_mask[i]);
        out.write(&flag, 1);
    }
    if (!out) throw IoError("write failed: " + path);
}

PairedActivationBatch load_batch(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kBatchMagic, 8) != 0)
        throw FormatError("bad batch magic in " + path);
    const std::uint32_t n = read_u32(in);
    const std::uint32_t d = read_u32(in);
    if (n == 0 || d == 0 || static_cast<std::uint64_t>(n) * d > (1ULL << 31))
        throw FormatError("batch dimensions overflow in " + path);
    PairedActivationBatch batch;
    batch.h_base = read_f32_rowmajor(in, n, d);
    batch.h_chat = read_f32_rowmajor(in, n, d);
    batch.template_mask.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        char flag;
        in.read(&flag, 1);
        if (!in) throw FormatError("batch file truncated");
        batch.template_mask[i] = static_cast<std::uint8_t>(flag);
    }
    in.peek();
    if (!in.eof()) throw FormatError("trailing bytes in " + path);
    return batch;
}

}  // namespace xdiff
