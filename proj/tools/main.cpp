#include <omp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedgen/federation.hpp"
#include "fedgen/metrics.hpp"
#include "fedgen/serialize.hpp"

using namespace fedgen;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

ExperimentConfig load_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config JSON: ") + e.what());
    }
    return ExperimentConfig::from_json(j);
}

void apply_threads(int threads) {
    if (threads > 0) omp_set_num_threads(threads);
}

int cmd_run(const std::string& config_path, const std::string& out_dir, long long seed_override,
            const std::string& precision) {
    ExperimentConfig cfg = load_config(config_path);
    if (seed_override >= 0) {
        cfg.seed = static_cast<std::uint64_t>(seed_override);
        cfg.validate();
    }
    const int width = precision == "f32" ? 4 : 8;
    auto summary = run_experiment(cfg, out_dir, width);
    std::printf("completed %d rounds -> %s\n", summary.rounds_completed, out_dir.c_str());
    if (!summary.final_exit_accuracy.empty()) {
        std::printf("final accuracy per exit:");
        for (double a : summary.final_exit_accuracy) std::printf(" %.4f", a);
        std::printf("\n");
    }
    return kExitOk;
}

int cmd_partition(const ExperimentConfig::DatasetCfg& dataset_cfg, int n_clients, double alpha,
                  std::uint64_t seed, const std::string& out_path) {
    ExperimentConfig cfg;
    cfg.dataset = dataset_cfg;
    cfg.n_clients = 1;  // bypass tier validation; only the dataset part matters here
    cfg.tier_counts = {1, 0, 0};
    auto [train, test] = datasets_from_config(cfg);
    (void)test;

    Partition part = dirichlet_partition(train, n_clients, alpha, seed);
    io::write_file(out_path, partition_to_json(part));

    std::printf("client | n      | per-class histogram\n");
    for (std::size_t c = 0; c < part.client_indices.size(); ++c) {
        std::vector<int> hist(static_cast<std::size_t>(train.num_classes), 0);
        for (auto idx : part.client_indices[c]) {
            hist[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(idx)])]++;
        }
        std::printf("%6zu | %6zu |", c, part.client_indices[c].size());
        for (int h : hist) std::printf(" %d", h);
        std::printf("\n");
    }
    std::printf("wrote %s\n", out_path.c_str());
    return kExitOk;
}

int cmd_cka(const std::string& run_dir, const std::string& out_path) {
    ExperimentConfig cfg = load_config(run_dir + "/config.json");
    auto [train, test] = datasets_from_config(cfg);
    (void)train;
    const ModelSpec spec = model_from_config(cfg);

    // fixed probe batch, identical to the in-run probe stream
    SeedTree tree(cfg.seed);
    const std::int64_t probe_n = std::min<std::int64_t>(cfg.eval.cka_probe, test.size());
    std::vector<std::int64_t> all(static_cast<std::size_t>(test.size()));
    for (std::int64_t i = 0; i < test.size(); ++i) all[static_cast<std::size_t>(i)] = i;
    RngStream rs = tree.stream("cka-probe");
    rs.shuffle(all);
    std::vector<std::int64_t> probe(all.begin(), all.begin() + probe_n);
    std::sort(probe.begin(), probe.end());
    Tensor inputs = test.batch(probe).first;

    // tier assignment mirrors the run: contiguous client-id blocks
    std::vector<int> tier_of(static_cast<std::size_t>(cfg.n_clients), 1);
    {
        int cid = 0;
        for (std::size_t t = 0; t < cfg.tier_counts.size(); ++t) {
            for (int i = 0; i < cfg.tier_counts[t]; ++i) tier_of[static_cast<std::size_t>(cid++)] = static_cast<int>(t) + 1;
        }
    }

    struct Entry {
        int client;
        int tier;
        metrics::FeatureMatrix features;
    };
    std::vector<Entry> entries;
    for (const auto& file : std::filesystem::directory_iterator(run_dir + "/final_locals")) {
        const std::string name = file.path().filename().string();
        if (name.size() < 8 || name.rfind(".manifest.json") == std::string::npos) continue;
        const int client = std::stoi(name.substr(7, 3));
        const std::string prefix = run_dir + "/final_locals/client_" + name.substr(7, 3);
        ParamSet params = io::load_params(prefix);
        entries.push_back({client, tier_of[static_cast<std::size_t>(client)],
                           metrics::segment_features(spec, params, 1, inputs)});
    }
    if (entries.size() < 2) throw std::runtime_error("cka: fewer than two local models in " + run_dir);
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.client < b.client; });

    std::ofstream csv(out_path);
    if (!csv) throw std::runtime_error("cka: cannot write " + out_path);
    csv << "client_a,tier_a,client_b,tier_b,cka\n";
    std::map<std::pair<int, int>, std::pair<double, int>> tier_means;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        for (std::size_t j = i + 1; j < entries.size(); ++j) {
            const double v = metrics::linear_cka(entries[i].features, entries[j].features);
            csv << entries[i].client << "," << entries[i].tier << "," << entries[j].client << ","
                << entries[j].tier << "," << v << "\n";
            auto key = std::minmax(entries[i].tier, entries[j].tier);
            auto& agg = tier_means[{key.first, key.second}];
            agg.first += v;
            agg.second += 1;
        }
    }
    std::printf("pairwise first-layer CKA by tier pair (mean over client pairs):\n");
    for (const auto& [pair, agg] : tier_means) {
        std::printf("  tier %d vs %d: %.4f (%d pairs)\n", pair.first, pair.second,
                    agg.first / agg.second, agg.second);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return kExitOk;
}

int cmd_hypernet_bench(const std::string& config_path, const std::string& out_path) {
    // Counting uses the large reference configuration; timed training runs on
    // a trainable bench model (from --config when given).
    ExperimentConfig cfg;
    cfg.dataset.side = 28;
    cfg.model.channels = {12, 24, 48};
    if (!config_path.empty()) cfg = load_config(config_path);

    const ModelSpec bench_spec = model_from_config(cfg);
    const ModelSpec ref_spec = compression_reference_spec();
    const std::int64_t hidden = cfg.hypernet.hidden_dim;

    std::int64_t bench_full = 1, ref_full = 1;
    for (const auto& ref : bench_spec.convs()) {
        bench_full = std::max(bench_full, std::min(ref.conv.in_ch, ref.conv.out_ch) * ref.conv.kernel);
    }
    for (const auto& ref : ref_spec.convs()) {
        ref_full = std::max(ref_full, std::min(ref.conv.in_ch, ref.conv.out_ch) * ref.conv.kernel);
    }

    std::vector<std::pair<std::string, std::int64_t>> ks = {
        {"25", 25}, {"50", 50}, {"100", 100}, {"200", 200}, {"full", 0}};

    std::ofstream csv(out_path);
    if (!csv) throw std::runtime_error("hypernet-bench: cannot write " + out_path);
    csv << "k,ref_param_count,ref_bytes,bench_param_count,bench_epoch_ms,bench_recon_mae\n";

    // synthetic parameter samples: a common base model plus per-sample
    // perturbations, so source and target factors share learnable structure
    const int n_samples = 6;
    const ParamSet base = build_model(bench_spec, cfg.seed + 1000);
    std::vector<ParamSet> models;
    for (int i = 0; i < n_samples + 1; ++i) {
        ParamSet m = base;
        RngStream rs(cfg.seed + 2000 + static_cast<std::uint64_t>(i));
        for (auto& [key, tensor] : m) {
            if (parse_key(key).role != ParamRole::ConvW) continue;
            for (auto& v : tensor.vec()) v += rs.normal(0.0, 0.02);
        }
        models.push_back(std::move(m));
    }

    for (const auto& [label, k_raw] : ks) {
        const std::int64_t ref_k = k_raw == 0 ? ref_full : k_raw;
        const std::int64_t bench_k = k_raw == 0 ? bench_full : k_raw;
        const auto ref_fp = metrics::analytic_hypernet_footprint(ref_spec, ref_k, hidden);

        auto bank = HyperNetBank::build(bench_spec, bench_k, hidden, false, cfg.seed + 7);
        for (int i = 0; i < n_samples; ++i) {
            bank.collect(models[static_cast<std::size_t>(i)], bench_spec.num_exits(), 1, i);
        }
        HyperHp hp;
        hp.epochs = cfg.hypernet.epochs;
        hp.lr = cfg.hypernet.lr;
        const auto t0 = std::chrono::steady_clock::now();
        bank.train_round(hp);
        const auto t1 = std::chrono::steady_clock::now();
        const double epoch_ms =
            std::chrono::duration<double, std::milli>(t1 - t0).count() / std::max(1, hp.epochs);

        const ParamSet& holdout = models.back();
        ParamSet gen = bank.generate(subnetwork(holdout, 1), 1, bench_spec.num_exits());
        double mae_sum = 0.0;
        int mae_n = 0;
        for (const auto& [key, tensor] : gen) {
            double s = 0.0;
            const Tensor& truth = holdout.at(key);
            for (std::int64_t i = 0; i < tensor.size(); ++i) s += std::abs(tensor[i] - truth[i]);
            mae_sum += s / static_cast<double>(tensor.size());
            ++mae_n;
        }
        const double mae = mae_n ? mae_sum / mae_n : 0.0;

        csv << label << "," << ref_fp.param_count << "," << ref_fp.bytes << ","
            << bank.param_count() << "," << epoch_ms << "," << mae << "\n";
        std::printf("k=%-5s ref_params=%-14lld bench_params=%-10lld epoch=%.1fms recon_mae=%.4f\n",
                    label.c_str(), static_cast<long long>(ref_fp.param_count),
                    static_cast<long long>(bank.param_count()), epoch_ms, mae);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_prefix, const std::string& config_path, int exit_index,
             int subset) {
    ExperimentConfig cfg = load_config(config_path);
    auto [train, test] = datasets_from_config(cfg);
    (void)train;
    const ModelSpec spec = model_from_config(cfg);
    ParamSet params = io::load_params(checkpoint_prefix);

    // Same seeded subset stream as an in-run evaluation with eval.subset set.
    std::vector<std::int64_t> indices;
    if (subset > 0 && subset < test.size()) {
        std::vector<std::int64_t> all(static_cast<std::size_t>(test.size()));
        for (std::int64_t i = 0; i < test.size(); ++i) all[static_cast<std::size_t>(i)] = i;
        RngStream rs = SeedTree(cfg.seed).stream("eval-subset");
        rs.shuffle(all);
        indices.assign(all.begin(), all.begin() + subset);
        std::sort(indices.begin(), indices.end());
    }
    const int from = exit_index > 0 ? exit_index : 1;
    const int to = exit_index > 0 ? exit_index : spec.num_exits();
    for (int e = from; e <= to; ++e) {
        const double acc = metrics::accuracy(spec, params, spec.num_exits(), e, test, indices);
        std::printf("exit %d accuracy: %.4f\n", e, acc);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedgen: heterogeneous federated learning simulator with hypernetwork weight generation"};
    app.require_subcommand(1);

    int threads = 0;
    app.add_option("--threads", threads, "OpenMP thread count (0 = hardware default)");

    auto* run = app.add_subcommand("run", "run a federated experiment from a config file");
    std::string run_config, run_out, precision = "f64";
    long long seed_override = -1;
    run->add_option("--config", run_config, "experiment config JSON")->required();
    run->add_option("--out", run_out, "output directory")->required();
    run->add_option("--seed", seed_override, "override the config seed");
    run->add_option("--precision", precision, "checkpoint storage precision")
        ->check(CLI::IsMember({"f32", "f64"}));

    auto* partition = app.add_subcommand("partition", "write a Dirichlet non-IID partition as JSON");
    ExperimentConfig::DatasetCfg pd;
    int p_clients = 50;
    double p_alpha = 0.5;
    std::uint64_t p_seed = 0;
    std::string p_out = "partition.json";
    partition->add_option("--dataset", pd.kind, "synth_patterns | synth_blobs | idx");
    partition->add_option("--classes", pd.num_classes, "synthetic class count");
    partition->add_option("--per-class", pd.per_class_train, "synthetic samples per class");
    partition->add_option("--side", pd.side, "synthetic image side");
    partition->add_option("--noise", pd.noise_sigma, "synthetic noise sigma");
    partition->add_option("--images", pd.train_images, "idx image file");
    partition->add_option("--labels", pd.train_labels, "idx label file");
    partition->add_option("--n-clients", p_clients, "number of clients");
    partition->add_option("--alpha", p_alpha, "Dirichlet concentration");
    partition->add_option("--seed", p_seed, "seed");
    partition->add_option("--out", p_out, "output path");

    auto* cka = app.add_subcommand("cka", "pairwise first-layer CKA grid from a finished run");
    std::string cka_dir, cka_out;
    cka->add_option("--run-dir", cka_dir, "output directory of a previous run")->required();
    cka->add_option("--out", cka_out, "CSV path (default: <run-dir>/cka.csv)");

    auto* bench = app.add_subcommand("hypernet-bench",
                                     "hypernetwork size/time/fidelity across k values");
    std::string bench_config, bench_out = "hypernet_bench.csv";
    bench->add_option("--config", bench_config, "optional experiment config for the bench model");
    bench->add_option("--out", bench_out, "CSV output path");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's test set");
    std::string eval_ckpt, eval_config;
    int eval_exit = 0, eval_subset = 0;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint prefix (without .bin)")->required();
    eval->add_option("--config", eval_config, "experiment config JSON")->required();
    eval->add_option("--exit", eval_exit, "exit index (default: all exits)");
    eval->add_option("--subset", eval_subset, "evaluate only the first N test samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        apply_threads(threads);
        if (run->parsed()) return cmd_run(run_config, run_out, seed_override, precision);
        if (partition->parsed()) {
            if (pd.kind == "idx") {
                pd.test_images = pd.train_images;  // partitioning only touches the train split
                pd.test_labels = pd.train_labels;
            }
            return cmd_partition(pd, p_clients, p_alpha, p_seed, p_out);
        }
        if (cka->parsed()) {
            return cmd_cka(cka_dir, cka_out.empty() ? cka_dir + "/cka.csv" : cka_out);
        }
        if (bench->parsed()) return cmd_hypernet_bench(bench_config, bench_out);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_config, eval_exit, eval_subset);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitConfig;
}
