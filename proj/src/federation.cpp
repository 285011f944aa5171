#include "fedgen/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fedgen/metrics.hpp"
#include "fedgen/serialize.hpp"

namespace fedgen {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

template <class T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace

void ExperimentConfig::validate() const {
    if (schema_version != 1) throw ConfigError("schema_version: expected 1");
    if (n_clients < 1) throw ConfigError("n_clients: must be >= 1");
    int sum = 0;
    for (int t : tier_counts) {
        if (t < 0) throw ConfigError("tier_counts: entries must be >= 0");
        sum += t;
    }
    if (sum != n_clients) {
        throw ConfigError("tier_counts: sum " + std::to_string(sum) + " != n_clients " +
                          std::to_string(n_clients));
    }
    if (rounds < 0) throw ConfigError("rounds: must be >= 0");
    if (!(participation_fraction > 0.0) || participation_fraction > 1.0) {
        throw ConfigError("participation_fraction: must be in (0, 1]");
    }
    if (!(alpha > 0.0)) throw ConfigError("alpha: must be > 0");
    if (local.epochs < 0) throw ConfigError("local.epochs: must be >= 0");
    if (!(local.lr > 0.0)) throw ConfigError("local.lr: must be > 0");
    if (local.batch_size < 1) throw ConfigError("local.batch_size: must be >= 1");
    if (hypernet.k < 1) throw ConfigError("hypernet.k: must be >= 1");
    if (hypernet.epochs < 0) throw ConfigError("hypernet.epochs: must be >= 0");
    if (hypernet.hidden_dim < 1) throw ConfigError("hypernet.hidden_dim: must be >= 1");
    if (eval.subset < 0) throw ConfigError("eval.subset: must be >= 0");
    if (eval.cka_probe < 2) throw ConfigError("eval.cka_probe: must be >= 2");
    if (dataset.kind != "synth_patterns" && dataset.kind != "synth_blobs" && dataset.kind != "idx") {
        throw ConfigError("dataset.kind: unknown '" + dataset.kind + "'");
    }
    if (dataset.kind == "idx" &&
        (dataset.train_images.empty() || dataset.train_labels.empty() ||
         dataset.test_images.empty() || dataset.test_labels.empty())) {
        throw ConfigError("dataset: idx kind requires train/test image and label paths");
    }
    if (model.kind != "conv_blocks" && model.kind != "deep_stack" && model.kind != "custom") {
        throw ConfigError("model.kind: unknown '" + model.kind + "'");
    }
    const ModelSpec spec = model_from_config(*this);
    if (static_cast<int>(tier_counts.size()) != spec.num_exits()) {
        throw ConfigError("tier_counts: need one entry per exit (" + std::to_string(spec.num_exits()) +
                          " exits)");
    }
    for (int t : active_tiers) {
        if (t < 1 || t > spec.num_exits()) throw ConfigError("active_tiers: tier out of range");
    }
    const int eligible = active_tiers.empty()
                             ? n_clients
                             : [&] {
                                   int n = 0;
                                   for (int t : active_tiers) n += tier_counts[static_cast<std::size_t>(t - 1)];
                                   return n;
                               }();
    if (static_cast<int>(participation_fraction * eligible) < 1) {
        throw ConfigError("participation_fraction: selects zero clients");
    }
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = schema_version;
    j["dataset"] = {{"kind", dataset.kind},
                    {"num_classes", dataset.num_classes},
                    {"per_class_train", dataset.per_class_train},
                    {"per_class_test", dataset.per_class_test},
                    {"side", dataset.side},
                    {"noise_sigma", dataset.noise_sigma}};
    if (dataset.kind == "idx") {
        j["dataset"]["train_images"] = dataset.train_images;
        j["dataset"]["train_labels"] = dataset.train_labels;
        j["dataset"]["test_images"] = dataset.test_images;
        j["dataset"]["test_labels"] = dataset.test_labels;
    }
    j["model"] = {{"kind", model.kind}};
    if (model.kind == "conv_blocks") j["model"]["channels"] = model.channels;
    if (model.kind == "deep_stack") {
        j["model"]["deep_exits"] = model.deep_exits;
        j["model"]["deep_channels"] = model.deep_channels;
    }
    if (model.kind == "custom") j["model"]["custom"] = model.custom;
    j["n_clients"] = n_clients;
    j["tier_counts"] = tier_counts;
    j["rounds"] = rounds;
    j["participation_fraction"] = participation_fraction;
    j["alpha"] = alpha;
    if (!active_tiers.empty()) j["active_tiers"] = active_tiers;
    j["local"] = {{"epochs", local.epochs}, {"lr", local.lr}, {"batch_size", local.batch_size}};
    j["hypernet"] = {{"enabled", hypernet.enabled},   {"k", hypernet.k},
                     {"epochs", hypernet.epochs},     {"lr", hypernet.lr},
                     {"hidden_dim", hypernet.hidden_dim}, {"generate_bn_fc", hypernet.generate_bn_fc}};
    j["multi_exit"] = multi_exit;
    j["eval"] = {{"subset", eval.subset}, {"cka", eval.cka}, {"cka_probe", eval.cka_probe}};
    j["personalize_epochs"] = personalize_epochs;
    j["seed"] = seed;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    try {
        cfg.schema_version = get_or(j, "schema_version", 1);
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            cfg.dataset.kind = get_or<std::string>(d, "kind", cfg.dataset.kind);
            cfg.dataset.num_classes = get_or(d, "num_classes", cfg.dataset.num_classes);
            cfg.dataset.per_class_train = get_or(d, "per_class_train", cfg.dataset.per_class_train);
            cfg.dataset.per_class_test = get_or(d, "per_class_test", cfg.dataset.per_class_test);
            cfg.dataset.side = get_or(d, "side", cfg.dataset.side);
            cfg.dataset.noise_sigma = get_or(d, "noise_sigma", cfg.dataset.noise_sigma);
            cfg.dataset.train_images = get_or<std::string>(d, "train_images", "");
            cfg.dataset.train_labels = get_or<std::string>(d, "train_labels", "");
            cfg.dataset.test_images = get_or<std::string>(d, "test_images", "");
            cfg.dataset.test_labels = get_or<std::string>(d, "test_labels", "");
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            cfg.model.kind = get_or<std::string>(m, "kind", cfg.model.kind);
            cfg.model.channels = get_or(m, "channels", cfg.model.channels);
            cfg.model.deep_exits = get_or(m, "deep_exits", cfg.model.deep_exits);
            cfg.model.deep_channels = get_or(m, "deep_channels", cfg.model.deep_channels);
            if (m.contains("custom")) cfg.model.custom = m.at("custom");
        }
        cfg.n_clients = get_or(j, "n_clients", cfg.n_clients);
        cfg.tier_counts = get_or(j, "tier_counts", cfg.tier_counts);
        cfg.rounds = get_or(j, "rounds", cfg.rounds);
        cfg.participation_fraction = get_or(j, "participation_fraction", cfg.participation_fraction);
        cfg.alpha = get_or(j, "alpha", cfg.alpha);
        cfg.active_tiers = get_or(j, "active_tiers", cfg.active_tiers);
        if (j.contains("local")) {
            const auto& l = j.at("local");
            cfg.local.epochs = get_or(l, "epochs", cfg.local.epochs);
            cfg.local.lr = get_or(l, "lr", cfg.local.lr);
            cfg.local.batch_size = get_or(l, "batch_size", cfg.local.batch_size);
        }
        if (j.contains("hypernet")) {
            const auto& h = j.at("hypernet");
            cfg.hypernet.enabled = get_or(h, "enabled", cfg.hypernet.enabled);
            cfg.hypernet.k = get_or(h, "k", cfg.hypernet.k);
            cfg.hypernet.epochs = get_or(h, "epochs", cfg.hypernet.epochs);
            cfg.hypernet.lr = get_or(h, "lr", cfg.hypernet.lr);
            cfg.hypernet.hidden_dim = get_or(h, "hidden_dim", cfg.hypernet.hidden_dim);
            cfg.hypernet.generate_bn_fc = get_or(h, "generate_bn_fc", cfg.hypernet.generate_bn_fc);
        }
        cfg.multi_exit = get_or(j, "multi_exit", cfg.multi_exit);
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            cfg.eval.subset = get_or(e, "subset", cfg.eval.subset);
            cfg.eval.cka = get_or(e, "cka", cfg.eval.cka);
            cfg.eval.cka_probe = get_or(e, "cka_probe", cfg.eval.cka_probe);
        }
        cfg.personalize_epochs = get_or(j, "personalize_epochs", cfg.personalize_epochs);
        cfg.seed = get_or(j, "seed", cfg.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

nlohmann::ordered_json RoundReport::to_json() const {
    nlohmann::ordered_json j;
    j["round"] = round;
    j["selected"] = selected;
    j["tiers"] = selected_tiers;
    j["exit_accuracy"] = exit_accuracy;
    j["mean_local_loss"] = mean_local_loss;
    auto hn = nlohmann::ordered_json::array();
    for (const auto& loss : hypernet_loss) {
        if (loss) hn.push_back(*loss); else hn.push_back(nullptr);
    }
    j["hypernet_loss"] = hn;
    if (generation_mae) j["generation_mae"] = *generation_mae; else j["generation_mae"] = nullptr;
    j["generated_tensors"] = generated_tensors;
    j["conv_contributors"] = conv_contributors_per_segment;
    if (cka_t1_t3) j["cka_t1_t3"] = *cka_t1_t3; else j["cka_t1_t3"] = nullptr;
    j["global_params"] = global_param_count;
    j["hypernet_params"] = hypernet_param_count;
    return j;
}

std::vector<int> select_clients(const std::vector<ClientProfile>& profiles, double fraction,
                                int round, std::uint64_t seed,
                                const std::vector<int>& active_tiers) {
    // Eligible clients grouped by tier, ascending.
    std::map<int, std::vector<int>> groups;
    for (const auto& p : profiles) {
        if (!active_tiers.empty() &&
            std::find(active_tiers.begin(), active_tiers.end(), p.tier) == active_tiers.end()) {
            continue;
        }
        groups[p.tier].push_back(p.client_id);
    }
    if (groups.empty()) throw std::invalid_argument("select_clients: no eligible clients");
    std::size_t eligible = 0;
    for (auto& [tier, ids] : groups) {
        std::sort(ids.begin(), ids.end());
        eligible += ids.size();
    }
    const int total = std::max(1, static_cast<int>(fraction * static_cast<double>(eligible)));

    const int g = static_cast<int>(groups.size());
    std::vector<int> quota(static_cast<std::size_t>(g), total / g);
    const int rem = total % g;
    for (int i = 0; i < rem; ++i) {
        quota[static_cast<std::size_t>((round + i) % g)] += 1;  // remainder rotates by round
    }

    // Clamp to group sizes and push overflow onto groups with headroom.
    std::vector<const std::vector<int>*> group_ids;
    std::vector<int> tiers;
    for (const auto& [tier, ids] : groups) {
        group_ids.push_back(&ids);
        tiers.push_back(tier);
    }
    int overflow = 0;
    for (int i = 0; i < g; ++i) {
        const int cap = static_cast<int>(group_ids[static_cast<std::size_t>(i)]->size());
        if (quota[static_cast<std::size_t>(i)] > cap) {
            overflow += quota[static_cast<std::size_t>(i)] - cap;
            quota[static_cast<std::size_t>(i)] = cap;
        }
    }
    for (int i = 0; overflow > 0 && i < 4 * g; ++i) {
        const std::size_t idx = static_cast<std::size_t>((round + i) % g);
        if (quota[idx] < static_cast<int>(group_ids[idx]->size())) {
            quota[idx] += 1;
            --overflow;
        }
    }

    SeedTree tree(seed);
    std::vector<int> selected;
    for (int i = 0; i < g; ++i) {
        std::vector<int> ids = *group_ids[static_cast<std::size_t>(i)];
        RngStream rs = tree.stream("select", static_cast<std::uint64_t>(round),
                                   static_cast<std::uint64_t>(tiers[static_cast<std::size_t>(i)]));
        rs.shuffle(ids);
        for (int k = 0; k < quota[static_cast<std::size_t>(i)]; ++k) {
            selected.push_back(ids[static_cast<std::size_t>(k)]);
        }
    }
    std::sort(selected.begin(), selected.end());
    return selected;
}

AggregateResult aggregate(const ParamSet& global, const std::vector<ClientUpdate>& updates) {
    AggregateResult result;
    result.global = global;
    for (auto& [key, tensor] : result.global) {
        Tensor acc(tensor.shape());
        double weight_sum = 0.0;
        int contributors = 0;
        for (const auto& update : updates) {
            const Tensor* contribution = nullptr;
            if (auto it = update.params.find(key); it != update.params.end()) {
                contribution = &it->second;
            } else if (auto jt = update.generated.find(key); jt != update.generated.end()) {
                contribution = &jt->second;
            }
            if (!contribution) continue;
            if (!contribution->same_shape(tensor)) {
                throw std::invalid_argument("aggregate: shape mismatch at '" + key + "' from client " +
                                            std::to_string(update.client_id));
            }
            const double w = static_cast<double>(update.n_samples);
            for (std::int64_t i = 0; i < acc.size(); ++i) acc[i] += w * (*contribution)[i];
            weight_sum += w;
            ++contributors;
        }
        result.contributors[key] = contributors;
        if (contributors > 0 && weight_sum > 0.0) {
            for (std::int64_t i = 0; i < tensor.size(); ++i) tensor[i] = acc[i] / weight_sum;
        }
        // zero contributors: previous global value is kept
    }
    return result;
}

ModelSpec model_from_config(const ExperimentConfig& cfg) {
    const std::int64_t in_ch = 1;
    if (cfg.model.kind == "conv_blocks") {
        return ModelSpec::conv_blocks(cfg.model.channels, cfg.dataset.num_classes, in_ch,
                                      cfg.dataset.side);
    }
    if (cfg.model.kind == "deep_stack") {
        return ModelSpec::deep_stack(cfg.model.deep_exits, cfg.model.deep_channels,
                                     cfg.dataset.num_classes, in_ch, cfg.dataset.side);
    }
    return ModelSpec::from_json(cfg.model.custom);
}

std::pair<Dataset, Dataset> datasets_from_config(const ExperimentConfig& cfg) {
    SeedTree tree(cfg.seed);
    if (cfg.dataset.kind == "idx") {
        Dataset train = load_idx(cfg.dataset.train_images, cfg.dataset.train_labels);
        Dataset test = load_idx(cfg.dataset.test_images, cfg.dataset.test_labels);
        return {std::move(train), std::move(test)};
    }
    if (cfg.dataset.kind == "synth_blobs") {
        return {synth_blobs(cfg.dataset.num_classes, cfg.dataset.per_class_train, cfg.dataset.side,
                            cfg.dataset.noise_sigma, tree.derive("data-train")),
                synth_blobs(cfg.dataset.num_classes, cfg.dataset.per_class_test, cfg.dataset.side,
                            cfg.dataset.noise_sigma, tree.derive("data-test"))};
    }
    return {synth_patterns(cfg.dataset.num_classes, cfg.dataset.per_class_train, cfg.dataset.side,
                           cfg.dataset.noise_sigma, tree.derive("data-train")),
            synth_patterns(cfg.dataset.num_classes, cfg.dataset.per_class_test, cfg.dataset.side,
                           cfg.dataset.noise_sigma, tree.derive("data-test"))};
}

Federation::Federation(ExperimentConfig cfg, Dataset train, Dataset test)
    : cfg_(std::move(cfg)), train_(std::move(train)), test_(std::move(test)), tree_(cfg_.seed) {
    cfg_.validate();
    train_.validate();
    test_.validate();
    spec_ = model_from_config(cfg_);
    global_ = build_model(spec_, tree_.derive("model-init"));
    if (cfg_.hypernet.enabled) {
        bank_ = HyperNetBank::build(spec_, cfg_.hypernet.k, cfg_.hypernet.hidden_dim,
                                    cfg_.hypernet.generate_bn_fc, tree_.derive("hypernet-init"));
    }

    partition_ = dirichlet_partition(train_, cfg_.n_clients, cfg_.alpha, tree_.derive("partition"));
    int cid = 0;
    for (std::size_t tier = 0; tier < cfg_.tier_counts.size(); ++tier) {
        for (int i = 0; i < cfg_.tier_counts[tier]; ++i) {
            ClientProfile profile;
            profile.client_id = cid;
            profile.tier = static_cast<int>(tier) + 1;
            profile.shard = partition_.client_indices[static_cast<std::size_t>(cid)];
            profiles_.push_back(std::move(profile));
            ++cid;
        }
    }

    if (cfg_.eval.subset > 0 && cfg_.eval.subset < test_.size()) {
        std::vector<std::int64_t> all(static_cast<std::size_t>(test_.size()));
        std::iota(all.begin(), all.end(), 0);
        RngStream rs = tree_.stream("eval-subset");
        rs.shuffle(all);
        eval_indices_.assign(all.begin(), all.begin() + cfg_.eval.subset);
        std::sort(eval_indices_.begin(), eval_indices_.end());
    }

    if (cfg_.eval.cka) {
        const std::int64_t probe_n = std::min<std::int64_t>(cfg_.eval.cka_probe, test_.size());
        std::vector<std::int64_t> all(static_cast<std::size_t>(test_.size()));
        std::iota(all.begin(), all.end(), 0);
        RngStream rs = tree_.stream("cka-probe");
        rs.shuffle(all);
        std::vector<std::int64_t> probe(all.begin(), all.begin() + probe_n);
        std::sort(probe.begin(), probe.end());
        cka_probe_ = test_.batch(probe).first;
    }
}

std::vector<double> Federation::evaluate_global() const {
    return metrics::accuracy_all_exits(spec_, global_, spec_.num_exits(), test_, eval_indices_);
}

RoundReport Federation::run_round(int round) {
    RoundReport report;
    report.round = round;
    last_timings_.clear();

    const auto selected =
        select_clients(profiles_, cfg_.participation_fraction, round, tree_.derive("select-root"),
                       cfg_.active_tiers);
    report.selected = selected;
    for (int id : selected) report.selected_tiers.push_back(profiles_[static_cast<std::size_t>(id)].tier);

    // local training, parallel over clients; outputs land in index slots so
    // the thread count cannot affect result order
    double t0 = now_seconds();
    std::vector<ClientUpdate> updates(selected.size());
    std::vector<std::vector<double>> local_losses(selected.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t i = 0; i < selected.size(); ++i) {
        const auto& profile = profiles_[static_cast<std::size_t>(selected[i])];
        ParamSet sub = subnetwork(global_, profile.tier, cfg_.multi_exit);
        LocalHp hp = cfg_.local;
        hp.seed = tree_.derive("local-train", static_cast<std::uint64_t>(round),
                               static_cast<std::uint64_t>(profile.client_id));
        auto [trained, stats] = local_train(spec_, std::move(sub), profile.tier, train_,
                                            profile.shard, hp, cfg_.multi_exit);
        ClientUpdate update;
        update.client_id = profile.client_id;
        update.tier = profile.tier;
        update.n_samples = stats.n_samples;
        update.params = std::move(trained);
        updates[i] = std::move(update);
        local_losses[i] = stats.per_exit_loss;
    }
    last_timings_["local_train"] = now_seconds() - t0;

    double loss_sum = 0.0;
    int loss_n = 0;
    for (const auto& losses : local_losses) {
        for (double l : losses) {
            loss_sum += l;
            ++loss_n;
        }
    }
    report.mean_local_loss = loss_n ? loss_sum / loss_n : 0.0;

    // hypernetwork sample collection and training (server side)
    t0 = now_seconds();
    if (cfg_.hypernet.enabled) {
        for (const auto& update : updates) {
            bank_.collect(update.params, update.tier, round, update.client_id);
        }
        HyperHp hp;
        hp.epochs = cfg_.hypernet.epochs;
        hp.lr = cfg_.hypernet.lr;
        report.hypernet_loss = bank_.train_round(hp);
    }
    last_timings_["hypernet_train"] = now_seconds() - t0;

    // weight generation for every selected client's missing segments
    t0 = now_seconds();
    if (cfg_.hypernet.enabled) {
        for (auto& update : updates) {
            if (update.tier < spec_.num_exits()) {
                update.generated = bank_.generate(update.params, update.tier, spec_.num_exits());
            }
        }
    }
    last_timings_["generate"] = now_seconds() - t0;

    // generation quality: distance to the mean of real updates per layer
    double mae_sum = 0.0;
    std::int64_t mae_n = 0;
    for (const auto& update : updates) {
        for (const auto& [key, gen] : update.generated) {
            Tensor ref(gen.shape());
            double wsum = 0.0;
            for (const auto& other : updates) {
                auto it = other.params.find(key);
                if (it == other.params.end()) continue;
                const double w = static_cast<double>(other.n_samples);
                for (std::int64_t k = 0; k < ref.size(); ++k) ref[k] += w * it->second[k];
                wsum += w;
            }
            const Tensor* base = nullptr;
            if (wsum > 0.0) {
                for (std::int64_t k = 0; k < ref.size(); ++k) ref[k] /= wsum;
                base = &ref;
            } else {
                base = &global_.at(key);
            }
            double mae = 0.0;
            for (std::int64_t k = 0; k < gen.size(); ++k) mae += std::abs(gen[k] - (*base)[k]);
            mae_sum += mae / static_cast<double>(gen.size());
            ++mae_n;
        }
        report.generated_tensors += static_cast<std::int64_t>(update.generated.size());
    }
    if (mae_n > 0) report.generation_mae = mae_sum / static_cast<double>(mae_n);

    // aggregation
    t0 = now_seconds();
    auto agg = aggregate(global_, updates);
    global_ = std::move(agg.global);
    last_timings_["aggregate"] = now_seconds() - t0;

    for (int s = 1; s <= spec_.num_exits(); ++s) {
        const auto ref = spec_.last_conv_of_segment(s);
        report.conv_contributors_per_segment.push_back(agg.contributors.at(ref.weight_key));
    }

    // evaluation on the held-out test set, every exit
    t0 = now_seconds();
    report.exit_accuracy = evaluate_global();
    last_timings_["evaluate"] = now_seconds() - t0;

    // feature-space alignment between the shallowest and deepest tiers
    last_local_params_.clear();
    for (auto& update : updates) last_local_params_.emplace(update.client_id, update.params);
    if (cfg_.eval.cka) {
        int t1_client = -1, tdeep_client = -1;
        for (const auto& update : updates) {
            if (update.tier == 1 && t1_client < 0) t1_client = update.client_id;
            if (update.tier == spec_.num_exits() && tdeep_client < 0) tdeep_client = update.client_id;
        }
        if (t1_client >= 0 && tdeep_client >= 0) {
            auto fa = metrics::segment_features(spec_, last_local_params_.at(t1_client), 1, cka_probe_);
            auto fb = metrics::segment_features(spec_, last_local_params_.at(tdeep_client), 1, cka_probe_);
            report.cka_t1_t3 = metrics::linear_cka(fa, fb);
        }
    }

    report.global_param_count = total_size(global_);
    report.hypernet_param_count = cfg_.hypernet.enabled ? bank_.param_count() : 0;
    return report;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                          int checkpoint_width) {
    cfg.validate();
    const io::DType dtype = checkpoint_width == 4 ? io::DType::F32 : io::DType::F64;
    std::filesystem::create_directories(out_dir);
    const auto cfg_json = cfg.to_json();
    io::write_file(out_dir + "/config.json", cfg_json.dump(2) + "\n");

    auto [train, test] = datasets_from_config(cfg);
    Federation fed(cfg, std::move(train), std::move(test));

    nlohmann::ordered_json manifest;
    manifest["artifact"] = "fedgen 0.1.0";
    manifest["config_hash"] = io::hash_hex(io::stable_json_hash(cfg_json));
    manifest["seed"] = cfg.seed;
    manifest["started_unix"] = static_cast<std::int64_t>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    manifest["outputs"] = {"config.json", "partition.json", "reports.jsonl", "timings.jsonl",
                           "checkpoint_final.manifest.json", "checkpoint_final.bin"};
    io::write_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");
    io::write_file(out_dir + "/partition.json", partition_to_json(fed.partition()));

    std::ofstream reports(out_dir + "/reports.jsonl", std::ios::binary);
    std::ofstream timings(out_dir + "/timings.jsonl", std::ios::binary);
    if (!reports || !timings) throw std::runtime_error("cannot write report streams in " + out_dir);

    RunSummary summary;
    for (int round = 1; round <= cfg.rounds; ++round) {
        RoundReport report = fed.run_round(round);
        reports << report.to_json().dump() << "\n";
        nlohmann::ordered_json t;
        t["round"] = round;
        for (const auto& [phase, secs] : fed.last_timings()) t[phase] = secs;
        timings << t.dump() << "\n";

        std::printf("round %4d | acc", round);
        for (double a : report.exit_accuracy) std::printf(" %.4f", a);
        std::printf(" | loss %.4f", report.mean_local_loss);
        if (report.generation_mae) std::printf(" | gen_mae %.4f", *report.generation_mae);
        std::printf("\n");
        std::fflush(stdout);

        summary.final_exit_accuracy = report.exit_accuracy;
        summary.final_cka_t1_t3 = report.cka_t1_t3;
        summary.rounds_completed = round;
    }
    reports.close();
    timings.close();

    io::save_params(fed.global(), out_dir + "/checkpoint_final", dtype);
    if (cfg.hypernet.enabled) {
        io::save_params(fed.bank().checkpoint(), out_dir + "/hypernet_final", dtype);
    }
    std::filesystem::create_directories(out_dir + "/final_locals");
    for (const auto& [client_id, params] : fed.last_local_params()) {
        char name[64];
        std::snprintf(name, sizeof(name), "/final_locals/client_%03d", client_id);
        io::save_params(params, out_dir + name, dtype);
    }

    // optional post-hoc personalization pass (experimental)
    if (cfg.personalize_epochs > 0 && cfg.rounds > 0) {
        double acc_sum = 0.0;
        int n = 0;
        for (const auto& profile : fed.profiles()) {
            ParamSet sub = subnetwork(fed.global(), profile.tier, cfg.multi_exit);
            LocalHp hp = cfg.local;
            hp.epochs = cfg.personalize_epochs;
            hp.seed = SeedTree(cfg.seed).derive("personalize", static_cast<std::uint64_t>(profile.client_id));
            auto [tuned, stats] = local_train(fed.spec(), std::move(sub), profile.tier,
                                              fed.train_set(), profile.shard, hp, cfg.multi_exit);
            acc_sum += metrics::accuracy(fed.spec(), tuned, profile.tier, profile.tier,
                                         fed.train_set(), profile.shard);
            ++n;
        }
        nlohmann::ordered_json p;
        p["personalized_shard_accuracy"] = acc_sum / std::max(1, n);
        io::write_file(out_dir + "/personalization.json", p.dump(2) + "\n");
    }
    return summary;
}

}  // namespace fedgen
