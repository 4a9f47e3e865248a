#pragma once

#include "xdiff/crosscoder.hpp"
#include "xdiff/diffing.hpp"
#include "xdiff/latent_scaling.hpp"
#include "xdiff/patching.hpp"
#include "xdiff/trainer.hpp"

#include <iosfwd>
#include <map>

namespace xdiff {

// --- weights persistence (XCODER01) ---------------------------------------

void save_params(const std::string& path, const CrosscoderParams& params);
CrosscoderParams load_params(const std::string& path);

// --- flat key=value config files -------------------------------------------

using KeyValueMap = std::map<std::string, std::string>;

KeyValueMap parse_key_values(std::istream& in);
KeyValueMap load_key_values(const std::string& path);
void apply_overrides(KeyValueMap& kv, const std::vector<std::string>& overrides);

WorldConfig world_config_from_kv(const KeyValueMap& kv);
TrainConfig train_config_from_kv(const KeyValueMap& kv);

// --- CSV reports ------------------------------------------------------------

/// Fixed 9-significant-digit float formatting keeps reruns byte-identical.
std::string format_float(double x);

void write_latents_csv(const std::string& path, const std::vector<LatentClassification>& classes);
void write_twins_csv(const std::string& path, const std::vector<TwinPair>& twins);
void write_scaling_csv(const std::string& path, const std::vector<BetaQuadruple>& report);
void write_patch_csv(const std::string& path, const std::vector<PatchResult>& results);
void write_delta_norm_histogram_csv(const std::string& path,
                                    const std::vector<LatentClassification>& classes,
                                    int bins = 50);
void write_nu_scatter_csv(const std::string& path, const std::vector<BetaQuadruple>& report,
                          const std::vector<LatentClassification>& classes);
void write_train_stats_csv(const std::string& path, const TrainStats& stats);

/// manifest.json: config hash, seed, artifact format versions.
void write_manifest(const std::string& path, const KeyValueMap& config, std::uint64_t seed);

std::uint64_t config_hash(const KeyValueMap& config);

}  // namespace xdiff
