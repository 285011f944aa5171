#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedgen/data.hpp"
#include "fedgen/rng.hpp"

using namespace fedgen;

namespace {

// Test fixture writer for the IDX format (big-endian header + raw bytes).
void write_be32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

std::string fixture_dir() {
    auto dir = std::filesystem::temp_directory_path() / "fedgen_idx_fixtures";
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::pair<std::string, std::string> write_idx_pair(std::uint32_t magic_images,
                                                   std::uint32_t magic_labels, int n_images,
                                                   int n_labels, int side,
                                                   const std::vector<unsigned char>& pixels,
                                                   const std::vector<unsigned char>& labels) {
    const std::string imgs = fixture_dir() + "/images_" + std::to_string(magic_images) + "_" +
                             std::to_string(n_images) + ".idx";
    const std::string lbls = fixture_dir() + "/labels_" + std::to_string(magic_labels) + "_" +
                             std::to_string(n_labels) + ".idx";
    {
        std::ofstream out(imgs, std::ios::binary);
        write_be32(out, magic_images);
        write_be32(out, static_cast<std::uint32_t>(n_images));
        write_be32(out, static_cast<std::uint32_t>(side));
        write_be32(out, static_cast<std::uint32_t>(side));
        out.write(reinterpret_cast<const char*>(pixels.data()),
                  static_cast<std::streamsize>(pixels.size()));
    }
    {
        std::ofstream out(lbls, std::ios::binary);
        write_be32(out, magic_labels);
        write_be32(out, static_cast<std::uint32_t>(n_labels));
        out.write(reinterpret_cast<const char*>(labels.data()),
                  static_cast<std::streamsize>(labels.size()));
    }
    return {imgs, lbls};
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("idx loader parses a valid pair bit-exactly") {
    RngStream rs(5);
    const int n = 7, side = 4;
    std::vector<unsigned char> pixels(static_cast<std::size_t>(n * side * side));
    for (auto& p : pixels) p = static_cast<unsigned char>(rs.uniform_int(0, 255));
    std::vector<unsigned char> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<unsigned char>(i % 3));

    auto [imgs, lbls] = write_idx_pair(0x803, 0x801, n, n, side, pixels, labels);
    Dataset ds = load_idx(imgs, lbls);
    CHECK(ds.size() == n);
    CHECK(ds.num_classes == 3);
    CHECK(ds.images.shape() == std::vector<std::int64_t>{n, 1, side, side});
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        CHECK(ds.images[static_cast<std::int64_t>(i)] ==
              static_cast<double>(pixels[i]) / 255.0);
    }
    for (int i = 0; i < n; ++i) CHECK(ds.labels[static_cast<std::size_t>(i)] == i % 3);
}

TEST_CASE("idx loader rejects a labels file with the image magic") {
    std::vector<unsigned char> pixels(16, 0);
    std::vector<unsigned char> labels(1, 0);
    auto [imgs, lbls] = write_idx_pair(0x803, 0x803, 1, 1, 4, pixels, labels);
    CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("idx loader rejects mismatched image/label counts") {
    std::vector<unsigned char> pixels(32, 0);
    std::vector<unsigned char> labels(1, 0);
    auto [imgs, lbls] = write_idx_pair(0x803, 0x801, 2, 1, 4, pixels, labels);
    CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("count mismatch"),
                         std::runtime_error);
}

TEST_CASE("idx loader rejects truncated image data") {
    const std::string imgs = fixture_dir() + "/truncated.idx";
    const std::string lbls = fixture_dir() + "/truncated_labels.idx";
    {
        std::ofstream out(imgs, std::ios::binary);
        write_be32(out, 0x803);
        write_be32(out, 4);
        write_be32(out, 4);
        write_be32(out, 4);
        out.put(char(1));  // 1 byte instead of 64
    }
    {
        std::ofstream out(lbls, std::ios::binary);
        write_be32(out, 0x801);
        write_be32(out, 4);
        for (int i = 0; i < 4; ++i) out.put(char(0));
    }
    CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("official FashionMNIST files parse when provided") {
    const char* dir = std::getenv("FASHION_MNIST_DIR");
    if (!dir) return;  // optional: runs only when the real dataset is present
    Dataset ds = load_idx(std::string(dir) + "/train-images-idx3-ubyte",
                          std::string(dir) + "/train-labels-idx1-ubyte");
    CHECK(ds.size() == 60000);
    CHECK(ds.num_classes == 10);
}

TEST_CASE("synth_blobs: zero noise collapses every sample onto its class mean") {
    Dataset ds = synth_blobs(10, 3, 8, 0.0, 17);
    CHECK(ds.size() == 30);
    const std::int64_t dim = 64;
    for (int c = 0; c < 10; ++c) {
        const double* first = ds.images.data() + (c * 3) * dim;
        for (int j = 1; j < 3; ++j) {
            const double* other = ds.images.data() + (c * 3 + j) * dim;
            for (std::int64_t i = 0; i < dim; ++i) CHECK(first[i] == other[i]);
        }
    }
}

TEST_CASE("synth datasets are deterministic in the seed and count correctly") {
    Dataset a = synth_blobs(10, 100, 8, 0.2, 3);
    Dataset b = synth_blobs(10, 100, 8, 0.2, 3);
    CHECK(a.size() == 1000);
    CHECK(a.images.vec() == b.images.vec());
    CHECK(a.labels == b.labels);

    Dataset c = synth_patterns(10, 5, 28, 0.1, 3);
    Dataset d = synth_patterns(10, 5, 28, 0.1, 3);
    CHECK(c.size() == 50);
    CHECK(c.images.vec() == d.images.vec());
    Dataset e = synth_patterns(10, 5, 28, 0.1, 4);
    CHECK(c.images.vec() != e.images.vec());
    for (double v : c.images.vec()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("dirichlet with one client returns everything") {
    Dataset ds = synth_blobs(5, 20, 8, 0.1, 7);
    Partition p = dirichlet_partition(ds, 1, 0.5, 1);
    CHECK(p.client_indices.size() == 1);
    CHECK(p.client_indices[0].size() == 100);
}

TEST_CASE("dirichlet partition law: disjoint union covering the dataset") {
    Dataset ds = synth_blobs(10, 50, 8, 0.1, 11);
    for (double alpha : {0.1, 1.0, 10000.0}) {
        Partition p = dirichlet_partition(ds, 13, alpha, 5);
        std::set<std::int64_t> seen;
        std::size_t total = 0;
        for (const auto& client : p.client_indices) {
            CHECK(!client.empty());
            total += client.size();
            for (auto idx : client) CHECK(seen.insert(idx).second);
        }
        CHECK(total == static_cast<std::size_t>(ds.size()));
    }
}

TEST_CASE("dirichlet partition is deterministic and preserves class totals") {
    Dataset ds = synth_blobs(10, 40, 8, 0.1, 13);
    Partition a = dirichlet_partition(ds, 7, 0.5, 9);
    Partition b = dirichlet_partition(ds, 7, 0.5, 9);
    CHECK(a.client_indices == b.client_indices);

    std::vector<std::int64_t> per_class(10, 0);
    for (const auto& client : a.client_indices) {
        for (auto idx : client) per_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])]++;
    }
    CHECK(per_class == ds.per_class_counts());
}

TEST_CASE("dirichlet with huge alpha is near-balanced per class") {
    Dataset ds = synth_blobs(10, 100, 8, 0.1, 15);  // 100 per class, 10 clients
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Partition p = dirichlet_partition(ds, 10, 10000.0, seed);
        for (const auto& client : p.client_indices) {
            std::vector<int> counts(10, 0);
            for (auto idx : client) counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])]++;
            for (int c = 0; c < 10; ++c) {
                // expected 10 per (client, class); +-20%  plus integer slack
                CHECK(counts[static_cast<std::size_t>(c)] >= 7);
                CHECK(counts[static_cast<std::size_t>(c)] <= 13);
            }
        }
    }
}

TEST_CASE("mean client-vs-global label KL decreases as alpha grows") {
    Dataset ds = synth_blobs(10, 60, 8, 0.1, 19);
    auto mean_kl = [&](double alpha) {
        double total = 0.0;
        int n = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Partition p = dirichlet_partition(ds, 12, alpha, seed);
            for (const auto& client : p.client_indices) {
                std::vector<double> hist(10, 0.0);
                for (auto idx : client) hist[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])]++;
                double kl = 0.0;
                for (int c = 0; c < 10; ++c) {
                    const double pc = hist[static_cast<std::size_t>(c)] / static_cast<double>(client.size());
                    if (pc > 0) kl += pc * std::log(pc / 0.1);
                }
                total += kl;
                ++n;
            }
        }
        return total / n;
    };
    const double kl_01 = mean_kl(0.1);
    const double kl_05 = mean_kl(0.5);
    const double kl_1 = mean_kl(1.0);
    const double kl_iid = mean_kl(10000.0);
    CHECK(kl_01 > kl_05);
    CHECK(kl_05 > kl_1);
    CHECK(kl_1 > kl_iid);
}

TEST_CASE("dirichlet rejects more clients than samples and bad alpha") {
    Dataset ds = synth_blobs(2, 2, 8, 0.1, 23);
    CHECK_THROWS_AS(dirichlet_partition(ds, 5, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_partition(ds, 2, 0.0, 0), std::invalid_argument);
}

TEST_CASE("partition JSON roundtrip") {
    Dataset ds = synth_blobs(4, 25, 8, 0.1, 29);
    Partition p = dirichlet_partition(ds, 5, 0.3, 77);
    Partition q = partition_from_json(partition_to_json(p));
    CHECK(q.client_indices == p.client_indices);
    CHECK(q.alpha == p.alpha);
    CHECK(q.seed == p.seed);
}

TEST_SUITE_END();
