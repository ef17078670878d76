#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffmark/attacks/attacks.hpp"
#include "diffmark/lab/dataset.hpp"
#include "diffmark/lcm/consistency.hpp"
#include "diffmark/pipeline/pipeline.hpp"
#include "diffmark/training/trainer.hpp"

namespace diffmark::lab {

namespace fs = std::filesystem;

struct DataConfig {
    int n = 3000;
    std::uint64_t seed = 1;
    // Optional folder of 32x32 PNGs ingested instead of generating.
    std::string ingest;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, n, seed, ingest)

struct EvalConfig {
    int images = 64;
    double fpr = 1e-3;
    int sweep_levels = 5;
    std::vector<attacks::AttackKind> sweep_kinds = attacks::all_kinds();
    int bootstrap = 1000;
    attacks::SurrogateTrainConfig surrogate;
    // Identification: registered images, database size, queries.
    int ident_real = 200;
    long ident_database = 10000;
    std::vector<long> scaling_sizes{100, 1000, 10000};
    // Transfer targets trained next to the base denoiser.
    std::uint64_t transfer_seed = 101;
    int transfer_wide_base = 48;
    int transfer_wide_mid = 96;
    int latency_images = 100;
    double difference_gain = 10.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, images, fpr, sweep_levels, sweep_kinds, bootstrap,
                                                surrogate, ident_real, ident_database, scaling_sizes, transfer_seed,
                                                transfer_wide_base, transfer_wide_mid, latency_images,
                                                difference_gain)

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::vector<std::string> stages;
    std::string output;
    DataConfig data;
    diffusion::VaeConfig vae;
    diffusion::VaeTrainConfig vae_train;
    diffusion::DenoiserConfig denoiser;
    diffusion::DenoiserTrainConfig denoiser_train;
    lcm::DistillConfig distill;
    codec::CodecConfig codec;
    codec::PretrainConfig pretrain;
    training::TrainConfig train;
    pipeline::EmbedConfig embed;
    EvalConfig eval;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, stages, output, data, vae, vae_train, denoiser,
                                                denoiser_train, distill, codec, pretrain, train, embed, eval)

// Desk defaults: the sizes the toy models were tuned at.
ExperimentConfig default_config();

const std::vector<std::string>& stage_names();
// Stages whose records must exist before `stage` runs.
std::vector<std::string> dependencies(const std::string& stage);

// Parses JSON over the defaults; unknown keys and type mismatches are
// ConfigErrors naming the offending path.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const fs::path& p, const std::vector<std::string>& overrides = {});
// "a.b.c=value": value is read as JSON, else as a string.
void apply_override(nlohmann::json& j, const std::string& kv);
std::string config_hash(const nlohmann::json& j);

// Output root: explicit value, else DIFFMARK_OUTPUT_ROOT, else ./diffmark_out.
fs::path resolve_root(const std::string& explicit_root);

struct StageRecord {
    std::string stage;
    std::string config_hash;
    std::map<std::string, std::string> artifacts;  // relative path -> sha256
    nlohmann::json summary;
    // Wall clock of the run that produced the record; not part of any hash.
    double seconds = 0.0;
    bool skipped = false;
};

// Single-image secrets: hex from the key file format.
struct EmbedOne {
    std::string secret_hex;
    int label = 0;
    std::uint64_t seed = 0;
};

class Lab {
public:
    Lab(ExperimentConfig cfg, fs::path root);

    const ExperimentConfig& config() const { return cfg_; }
    const fs::path& root() const { return root_; }
    fs::path dir(const std::string& stage) const { return root_ / stage; }

    // Runs a stage unless an up-to-date record exists (or force is set).
    StageRecord run(const std::string& stage, bool force = false);
    bool done(const std::string& stage) const;
    std::optional<StageRecord> record(const std::string& stage) const;
    // Hash of the config blocks a stage reads plus its dependencies' hashes.
    std::string stage_hash(const std::string& stage) const;

    // Loaders; a missing input throws DependencyError naming its stage.
    Dataset data() const;
    diffusion::ToyVAE vae() const;
    diffusion::ToyDenoiser<float> denoiser() const;
    lcm::ConsistencyModel<float> consistency(const diffusion::ToyDenoiser<float>& teacher) const;
    std::pair<codec::Encoder<float>, codec::Decoder<float>> pretrained_codec() const;
    std::pair<codec::Encoder<float>, codec::Decoder<float>> watermark_codec() const;
    attacks::Surrogate surrogate() const;

    // Evaluation requests for the held-out set: seeded secrets and labels.
    std::vector<pipeline::EmbedRequest> eval_requests(int n, std::uint64_t tag) const;

    // Trains once per training-injection policy from the pretrained codec and
    // evaluates each under both inference policies (root/injection-ab).
    nlohmann::json injection_ab();

    // Single-image commands.
    void embed_to(const EmbedOne& e, const fs::path& out);
    nlohmann::json detect_file(const fs::path& in, const std::string& key_hex, double fpr);
    void attack_file(const fs::path& in, const fs::path& out, const attacks::AttackSpec& spec);

private:
    nlohmann::json run_stage(const std::string& stage);
    nlohmann::json gen_data();
    nlohmann::json train_vae_stage();
    nlohmann::json train_diffusion();
    nlohmann::json distill_lcm();
    nlohmann::json pretrain_codec();
    nlohmann::json train_watermark();
    nlohmann::json embed_stage();
    nlohmann::json detect_stage();
    nlohmann::json attack_sweep_stage();
    nlohmann::json identify_stage();
    nlohmann::json transfer_stage();
    nlohmann::json report_stage();
    void require(const std::string& stage) const;
    attacks::AttackContext attack_context(const diffusion::ToyVAE& vae, const diffusion::ToyDenoiser<float>& den,
                                          const attacks::Surrogate* sur) const;

    ExperimentConfig cfg_;
    nlohmann::json cfg_json_;
    fs::path root_;
};

// Artifact hashes of every regular file under dir, relative paths.
std::map<std::string, std::string> hash_tree(const fs::path& dir);

}  // namespace diffmark::lab
