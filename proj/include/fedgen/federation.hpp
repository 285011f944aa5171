#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgen/data.hpp"
#include "fedgen/hypernet.hpp"
#include "fedgen/multiexit.hpp"
#include "fedgen/params.hpp"
#include "fedgen/rng.hpp"

namespace fedgen {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ClientProfile {
    int client_id = 0;
    int tier = 1;
    std::vector<std::int64_t> shard;
};

struct ExperimentConfig {
    int schema_version = 1;

    struct DatasetCfg {
        std::string kind = "synth_patterns";  // synth_patterns | synth_blobs | idx
        int num_classes = 10;
        int per_class_train = 400;
        int per_class_test = 100;
        std::int64_t side = 28;
        double noise_sigma = 0.15;
        std::string train_images, train_labels, test_images, test_labels;  // idx paths
    } dataset;

    struct ModelCfg {
        std::string kind = "conv_blocks";  // conv_blocks | deep_stack | custom
        std::vector<std::int64_t> channels{8, 16, 32};
        int deep_exits = 10;
        std::int64_t deep_channels = 16;
        nlohmann::json custom;
    } model;

    int n_clients = 50;
    std::vector<int> tier_counts{17, 17, 16};
    int rounds = 300;
    double participation_fraction = 0.2;
    double alpha = 10000.0;
    std::vector<int> active_tiers;  // empty: every tier participates in selection

    LocalHp local{5, 0.005, 32, 0};

    struct HyperCfg {
        bool enabled = true;
        std::int64_t k = 100;
        int epochs = 25;
        double lr = 0.0005;
        std::int64_t hidden_dim = 256;
        bool generate_bn_fc = false;
    } hypernet;

    bool multi_exit = true;

    struct EvalCfg {
        int subset = 0;  // 0: full test set
        bool cka = false;
        int cka_probe = 512;
    } eval;

    int personalize_epochs = 0;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError naming the offending field
    nlohmann::ordered_json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

struct RoundReport {
    int round = 0;
    std::vector<int> selected;
    std::vector<int> selected_tiers;
    std::vector<double> exit_accuracy;
    double mean_local_loss = 0.0;
    std::vector<std::optional<double>> hypernet_loss;
    std::optional<double> generation_mae;
    std::int64_t generated_tensors = 0;
    std::vector<int> conv_contributors_per_segment;
    std::optional<double> cka_t1_t3;
    std::int64_t global_param_count = 0;
    std::int64_t hypernet_param_count = 0;

    nlohmann::ordered_json to_json() const;
};

struct ClientUpdate {
    int client_id = 0;
    int tier = 1;
    std::int64_t n_samples = 0;
    ParamSet params;     // what the client trained and returned (tier key set)
    ParamSet generated;  // hypernetwork output for layers the tier lacks
};

/// Stratified sampling: floor(fraction * n) clients, split as evenly as
/// possible across tiers (remainder rotating with the round index), uniform
/// without replacement within a tier. Deterministic in (round, seed).
std::vector<int> select_clients(const std::vector<ClientProfile>& profiles, double fraction,
                                int round, std::uint64_t seed,
                                const std::vector<int>& active_tiers = {});

struct AggregateResult {
    ParamSet global;
    std::map<std::string, int> contributors;
};

/// Sample-count weighted mean per layer over every contributor that carries
/// it (real update or generated tensor); layers nobody carries keep the
/// previous global value.
AggregateResult aggregate(const ParamSet& global, const std::vector<ClientUpdate>& updates);

/// One experiment's mutable state: global model, hypernetworks, profiles.
class Federation {
public:
    Federation(ExperimentConfig cfg, Dataset train, Dataset test);

    RoundReport run_round(int round);

    const ModelSpec& spec() const { return spec_; }
    const ParamSet& global() const { return global_; }
    const std::vector<ClientProfile>& profiles() const { return profiles_; }
    const HyperNetBank& bank() const { return bank_; }
    const Partition& partition() const { return partition_; }
    const ExperimentConfig& config() const { return cfg_; }
    const Dataset& train_set() const { return train_; }
    const Dataset& test_set() const { return test_; }
    const std::map<std::string, double>& last_timings() const { return last_timings_; }
    /// Locally trained parameter sets of the most recent round, by client id.
    const std::map<int, ParamSet>& last_local_params() const { return last_local_params_; }

    std::vector<double> evaluate_global() const;  // per-exit accuracy

private:
    ExperimentConfig cfg_;
    Dataset train_, test_;
    SeedTree tree_;
    ModelSpec spec_;
    ParamSet global_;
    HyperNetBank bank_;
    std::vector<ClientProfile> profiles_;
    Partition partition_;
    std::vector<std::int64_t> eval_indices_;
    Tensor cka_probe_;
    std::map<std::string, double> last_timings_;
    std::map<int, ParamSet> last_local_params_;
};

ModelSpec model_from_config(const ExperimentConfig& cfg);
std::pair<Dataset, Dataset> datasets_from_config(const ExperimentConfig& cfg);

struct RunSummary {
    std::vector<double> final_exit_accuracy;
    std::optional<double> final_cka_t1_t3;
    int rounds_completed = 0;
};

/// Full protocol run: writes manifest.json, config.json, partition.json,
/// reports.jsonl (deterministic), timings.jsonl (wall clock), final
/// checkpoint and the final round's local parameter sets under `out_dir`.
/// `checkpoint_width` selects the checkpoint storage width in bytes (8 or 4);
/// computation is always double precision.
RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                          int checkpoint_width = 8);

}  // namespace fedgen
