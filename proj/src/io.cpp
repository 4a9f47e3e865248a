#include "xdiff/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace xdiff {

namespace {

constexpr char kWeightsMagic[8] = {'X', 'C', 'O', 'D', 'E', 'R', '0', '1'};

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
    if (!in) throw FormatError("weights file truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("weights file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_block(std::ostream& out, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const float f = static_cast<float>(m(i, j));
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
}

void write_block(std::ostream& out, const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v[i]);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
}

Matrix read_block(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            float f;
            in.read(reinterpret_cast<char*>(&f), 4);
            if (!in) throw FormatError("weights file truncated");
            m(i, j) = static_cast<double>(f);
        }
    return m;
}

Vector read_vector(std::istream& in, Eigen::Index n) {
    Matrix m = read_block(in, n, 1);
    return m.col(0);
}

}  // namespace

void save_params(const std::string& path, const CrosscoderParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kWeightsMagic, 8);
    write_u32(out, params.variant.kind == VariantKind::L1 ? 0u : 1u);
    write_u32(out, static_cast<std::uint32_t>(params.D));
    write_u32(out, static_cast<std::uint32_t>(params.d));
    write_u32(out, 0u);  // reserved
    const double theta = params.theta.value_or(std::numeric_limits<double>::quiet_NaN());
    if (params.variant.kind == VariantKind::L1) {
        write_f64(out, params.variant.mu);
        write_f64(out, 0.0);  // theta unused for L1
    } else {
        write_f64(out, static_cast<double>(params.variant.k));
        write_f64(out, static_cast<double>(params.variant.k_aux));
        write_f64(out, params.variant.alpha);
        write_f64(out, theta);
    }
    write_block(out, params.enc_base);
    write_block(out, params.enc_chat);
    write_block(out, params.b_enc);
    write_block(out, params.dec_base);
    write_block(out, params.dec_chat);
    write_block(out, params.b_dec_base);
    write_block(out, params.b_dec_chat);
    if (!out) throw IoError("write failed: " + path);
}

CrosscoderParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kWeightsMagic, 8) != 0)
        throw FormatError("bad weights magic in " + path);
    const std::uint32_t tag = read_u32(in);
    const std::uint32_t D = read_u32(in);
    const std::uint32_t d = read_u32(in);
    read_u32(in);  // reserved
    if (tag > 1) throw FormatError("unknown variant tag in " + path);
    if (D == 0 || d == 0 || static_cast<std::uint64_t>(D) * d > (1ULL << 28))
        throw FormatError("weights dimensions overflow in " + path);

    CrosscoderParams params;
    params.D = static_cast<int>(D);
    params.d = static_cast<int>(d);
    if (tag == 0) {
        const double mu = read_f64(in);
        const double theta = read_f64(in);
        if (theta != 0.0) throw FormatError("L1 weights carry a nonzero theta in " + path);
        params.variant = Variant::l1(mu);
        params.theta = std::nullopt;
    } else {
        const double k = read_f64(in);
        const double k_aux = read_f64(in);
        const double alpha = read_f64(in);
        const double theta = read_f64(in);
        params.variant = Variant::batch_topk(static_cast<int>(k), static_cast<int>(k_aux), alpha);
        params.theta = std::isnan(theta) ? std::nullopt : std::optional<double>(theta);
    }
    params.enc_base = read_block(in, D, d);
    params.enc_chat = read_block(in, D, d);
    params.b_enc = read_vector(in, D);
    params.dec_base = read_block(in, D, d);
    params.dec_chat = read_block(in, D, d);
    params.b_dec_base = read_vector(in, d);
    params.b_dec_chat = read_vector(in, d);
    in.peek();
    if (!in.eof()) throw FormatError("trailing bytes in " + path);
    return params;
}

KeyValueMap parse_key_values(std::istream& in) {
    KeyValueMap kv;
    std::string line;
    while (std::getline(in, line)) {
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
        if (key.empty()) continue;
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

KeyValueMap load_key_values(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    return parse_key_values(in);
}

void apply_overrides(KeyValueMap& kv, const std::vector<std::string>& overrides) {
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override must look like key=value: " + item);
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
}

namespace {

template <typename T, typename Parse>
void maybe(const KeyValueMap& kv, const char* key, T& out, Parse parse) {
    const auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
        out = parse(it->second);
    } catch (const std::exception&) {
        throw ConfigError(std::string("bad value for config key '") + key + "': " + it->second);
    }
}

int to_int(const std::string& s) { return std::stoi(s); }
double to_double(const std::string& s) { return std::stod(s); }
std::uint64_t to_u64(const std::string& s) { return std::stoull(s); }

}  // namespace

WorldConfig world_config_from_kv(const KeyValueMap& kv) {
    std::ostringstream text;
    for (const auto& [k, v] : kv) text << k << " = " << v << "\n";
    std::istringstream in(text.str());
    return parse_world_config(in);
}

TrainConfig train_config_from_kv(const KeyValueMap& kv) {
    TrainConfig cfg;
    std::string variant = "batchtopk";
    maybe(kv, "variant", variant, [](const std::string& s) { return s; });
    if (variant == "l1") cfg.variant.kind = VariantKind::L1;
    else if (variant == "batchtopk") cfg.variant.kind = VariantKind::BatchTopK;
    else throw ConfigError("train config: variant must be l1 or batchtopk");
    maybe(kv, "mu", cfg.variant.mu, to_double);
    maybe(kv, "k", cfg.variant.k, to_int);
    maybe(kv, "k_aux", cfg.variant.k_aux, to_int);
    maybe(kv, "alpha", cfg.variant.alpha, to_double);
    maybe(kv, "lr", cfg.learning_rate, to_double);
    maybe(kv, "adam_beta1", cfg.adam_beta1, to_double);
    maybe(kv, "adam_beta2", cfg.adam_beta2, to_double);
    maybe(kv, "adam_eps", cfg.adam_eps, to_double);
    maybe(kv, "batch_size", cfg.batch_size, to_int);
    maybe(kv, "steps", cfg.steps, to_int);
    maybe(kv, "dead_window", cfg.dead_window, to_int);
    maybe(kv, "mu_warmup_steps", cfg.mu_warmup_steps, to_int);
    maybe(kv, "train_seed", cfg.seed, to_u64);
    maybe(kv, "init_scale", cfg.init_scale, to_double);
    maybe(kv, "dict_size", cfg.dict_size, to_int);
    maybe(kv, "expansion", cfg.expansion, to_int);
    cfg.validate();
    return cfg;
}

std::string format_float(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    return out;
}

}  // namespace

void write_latents_csv(const std::string& path, const std::vector<LatentClassification>& classes) {
    auto out = open_out(path);
    out << "latent_id,delta_norm,class,freq,dead_flag\n";
    for (const auto& c : classes) {
        const bool dead = c.cls == LatentClass::Dead;
        out << c.latent << ',' << (dead ? "" : format_float(c.delta_norm)) << ','
            << to_string(c.cls) << ',' << format_float(c.freq) << ',' << (dead ? 1 : 0) << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

void write_twins_csv(const std::string& path, const std::vector<TwinPair>& twins) {
    auto out = open_out(path);
    out << "chat_id,base_id,cosine,divergence\n";
    for (const auto& t : twins)
        out << t.chat_latent << ',' << t.base_latent << ',' << format_float(t.cosine) << ','
            << format_float(t.divergence) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

void write_scaling_csv(const std::string& path, const std::vector<BetaQuadruple>& report) {
    auto out = open_out(path);
    out << "latent_id,beta_r_base,beta_r_chat,beta_eps_base,beta_eps_chat,nu_r,nu_eps,"
           "support_count,flags\n";
    for (const auto& q : report) {
        std::string flags;
        auto add_flag = [&flags](const char* f) {
            if (!flags.empty()) flags += ';';
            flags += f;
        };
        if (q.excluded) add_flag("never-fired");
        if (q.negative_base_flag) add_flag("negative-base");
        if (q.low_support_flag) add_flag("low-support");
        if (q.ratio_undefined_flag) add_flag("ratio-undefined");
        out << q.latent << ',';
        if (q.excluded) {
            out << ",,,,,," << 0 << ',' << flags << '\n';
            continue;
        }
        out << format_float(q.beta_r_base) << ',' << format_float(q.beta_r_chat) << ','
            << format_float(q.beta_eps_base) << ',' << format_float(q.beta_eps_chat) << ','
            << (q.ratio_undefined_flag ? "" : format_float(q.nu_r)) << ','
            << (q.ratio_undefined_flag ? "" : format_float(q.nu_eps)) << ',' << q.support << ','
            << flags << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

void write_patch_csv(const std::string& path, const std::vector<PatchResult>& results) {
    auto out = open_out(path);
    out << "spec,kl_mean_all,kl_mean_first9,n_positions\n";
    for (const auto& r : results)
        out << r.label << ',' << format_float(r.kl_mean_all) << ','
            << format_float(r.kl_mean_first9) << ',' << r.n_positions << '\n';
    if (!out) throw IoError("write failed: " + path);
}

void write_delta_norm_histogram_csv(const std::string& path,
                                    const std::vector<LatentClassification>& classes, int bins) {
    auto out = open_out(path);
    out << "bin_lo,bin_hi,count\n";
    std::vector<long> counts(static_cast<std::size_t>(bins), 0);
    for (const auto& c : classes) {
        if (c.cls == LatentClass::Dead) continue;
        int b = static_cast<int>(c.delta_norm * bins);
        b = std::min(std::max(b, 0), bins - 1);
        ++counts[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < bins; ++b)
        out << format_float(static_cast<double>(b) / bins) << ','
            << format_float(static_cast<double>(b + 1) / bins) << ','
            << counts[static_cast<std::size_t>(b)] << '\n';
    if (!out) throw IoError("write failed: " + path);
}

void write_nu_scatter_csv(const std::string& path, const std::vector<BetaQuadruple>& report,
                          const std::vector<LatentClassification>& classes) {
    auto out = open_out(path);
    out << "latent_id,nu_r,nu_eps,class\n";
    for (const auto& q : report) {
        if (q.excluded || q.ratio_undefined_flag) continue;
        const char* cls = "?";
        for (const auto& c : classes)
            if (c.latent == q.latent) {
                cls = to_string(c.cls);
                break;
            }
        out << q.latent << ',' << format_float(q.nu_r) << ',' << format_float(q.nu_eps) << ','
            << cls << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

void write_train_stats_csv(const std::string& path, const TrainStats& stats) {
    auto out = open_out(path);
    out << "step,recon_base,recon_chat,sparsity,aux,total,l0,fve,dead_fraction\n";
    for (std::size_t i = 0; i < stats.loss_history.size(); ++i) {
        const LossBreakdown& l = stats.loss_history[i];
        const bool has = i < stats.l0_history.size();
        out << i << ',' << format_float(l.recon_base) << ',' << format_float(l.recon_chat) << ','
            << format_float(l.sparsity) << ',' << format_float(l.aux) << ','
            << format_float(l.total) << ',' << (has ? format_float(stats.l0_history[i]) : "") << ','
            << (has ? format_float(stats.fve_history[i]) : "") << ','
            << (has ? format_float(stats.dead_history[i]) : "") << '\n';
    }
    out << "# held-out: fve_base=" << format_float(stats.fve_base)
        << " fve_chat=" << format_float(stats.fve_chat)
        << " fve_total=" << format_float(stats.fve_total)
        << " l0_mean=" << format_float(stats.l0_mean)
        << " dead_fraction=" << format_float(stats.dead_fraction) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

std::uint64_t config_hash(const KeyValueMap& config) {
    // FNV-1a over the sorted key=value lines (std::map iterates sorted).
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [k, v] : config) {
        mix(k);
        mix("=");
        mix(v);
        mix("\n");
    }
    return h;
}

void write_manifest(const std::string& path, const KeyValueMap& config, std::uint64_t seed) {
    nlohmann::ordered_json j;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(config)));
    j["config_hash"] = hex;
    j["seed"] = seed;
    j["versions"] = {{"xdiff", "0.1.0"}, {"weights_format", "XCODER01"},
                     {"batch_format", "XDIFFACT"}};
    nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config) cfg[k] = v;
    j["config"] = cfg;
    auto out = open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace xdiff
