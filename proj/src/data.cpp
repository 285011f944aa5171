#include "fedgen/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "fedgen/rng.hpp"

namespace fedgen {

std::vector<std::int64_t> Dataset::per_class_counts() const {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (int lbl : labels) counts[static_cast<std::size_t>(lbl)]++;
    return counts;
}

std::pair<Tensor, std::vector<int>> Dataset::batch(const std::vector<std::int64_t>& indices) const {
    const std::int64_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const std::int64_t row = C * H * W;
    Tensor out({static_cast<std::int64_t>(indices.size()), C, H, W});
    std::vector<int> lbls(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::int64_t src = indices[i];
        if (src < 0 || src >= size()) {
            throw std::out_of_range("Dataset::batch: index " + std::to_string(src) + " outside [0, " +
                                    std::to_string(size()) + ")");
        }
        std::copy_n(images.data() + src * row, row, out.data() + static_cast<std::int64_t>(i) * row);
        lbls[i] = labels[static_cast<std::size_t>(src)];
    }
    return {std::move(out), std::move(lbls)};
}

void Dataset::validate() const {
    if (images.ndim() != 4) throw std::invalid_argument("Dataset: images must be [N, C, H, W]");
    if (size() <= 0) throw std::invalid_argument("Dataset: empty");
    if (static_cast<std::int64_t>(labels.size()) != size()) {
        throw std::invalid_argument("Dataset: label count " + std::to_string(labels.size()) +
                                    " != image count " + std::to_string(size()));
    }
    for (int lbl : labels) {
        if (lbl < 0 || lbl >= num_classes) {
            throw std::invalid_argument("Dataset: label " + std::to_string(lbl) + " outside [0, " +
                                        std::to_string(num_classes) + ")");
        }
    }
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("idx: truncated header in " + path);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("idx: cannot open " + images_path);
    const std::uint32_t img_magic = read_be32(imgs, images_path);
    if (img_magic != 0x00000803u) {
        throw std::runtime_error("idx: bad magic in " + images_path + ": expected 0x00000803, got 0x" +
                                 [&] { char b[16]; std::snprintf(b, sizeof(b), "%08x", img_magic); return std::string(b); }());
    }
    const std::uint32_t n_images = read_be32(imgs, images_path);
    const std::uint32_t rows = read_be32(imgs, images_path);
    const std::uint32_t cols = read_be32(imgs, images_path);

    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw std::runtime_error("idx: cannot open " + labels_path);
    const std::uint32_t lbl_magic = read_be32(lbls, labels_path);
    if (lbl_magic != 0x00000801u) {
        throw std::runtime_error("idx: bad magic in " + labels_path + ": expected 0x00000801, got 0x" +
                                 [&] { char b[16]; std::snprintf(b, sizeof(b), "%08x", lbl_magic); return std::string(b); }());
    }
    const std::uint32_t n_labels = read_be32(lbls, labels_path);
    if (n_images != n_labels) {
        throw std::runtime_error("idx: count mismatch: " + std::to_string(n_images) + " images vs " +
                                 std::to_string(n_labels) + " labels");
    }

    const std::int64_t n = static_cast<std::int64_t>(n_images);
    const std::int64_t hw = static_cast<std::int64_t>(rows) * cols;
    std::vector<unsigned char> buf(static_cast<std::size_t>(n * hw));
    imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!imgs) throw std::runtime_error("idx: truncated image data in " + images_path);

    Dataset ds;
    ds.images = Tensor({n, 1, static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)});
    for (std::int64_t i = 0; i < n * hw; ++i) {
        ds.images[i] = static_cast<double>(buf[static_cast<std::size_t>(i)]) / 255.0;
    }

    std::vector<unsigned char> lbuf(static_cast<std::size_t>(n));
    lbls.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(lbuf.size()));
    if (!lbls) throw std::runtime_error("idx: truncated label data in " + labels_path);
    ds.labels.assign(lbuf.begin(), lbuf.end());
    ds.num_classes = ds.labels.empty() ? 0 : 1 + *std::max_element(ds.labels.begin(), ds.labels.end());
    ds.validate();
    return ds;
}

Dataset synth_blobs(int num_classes, int per_class, std::int64_t side, double noise_sigma,
                    std::uint64_t seed) {
    if (num_classes <= 0 || per_class <= 0 || side <= 0) {
        throw std::invalid_argument("synth_blobs: counts must be positive");
    }
    SeedTree tree(seed);
    const std::int64_t dim = side * side;
    const std::int64_t n = static_cast<std::int64_t>(num_classes) * per_class;

    // Class means: random directions scaled so the per-pixel magnitude is O(0.5).
    std::vector<std::vector<double>> means(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
        RngStream rs = tree.stream("blob-mean", static_cast<std::uint64_t>(c));
        auto& m = means[static_cast<std::size_t>(c)];
        m.resize(static_cast<std::size_t>(dim));
        double norm = 0.0;
        for (auto& v : m) {
            v = rs.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        const double scale = 0.5 * std::sqrt(static_cast<double>(dim)) / (norm > 0 ? norm : 1.0);
        for (auto& v : m) v = 0.5 + v * scale * 0.5;  // centered at mid-gray, clipped later
    }

    Dataset ds;
    ds.images = Tensor({n, 1, side, side});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.num_classes = num_classes;
    for (int c = 0; c < num_classes; ++c) {
        RngStream rs = tree.stream("blob-noise", static_cast<std::uint64_t>(c));
        for (int j = 0; j < per_class; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(c) * per_class + j;
            ds.labels[static_cast<std::size_t>(idx)] = c;
            double* img = ds.images.data() + idx * dim;
            const auto& m = means[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < dim; ++i) {
                img[i] = m[static_cast<std::size_t>(i)] + (noise_sigma > 0 ? rs.normal(0.0, noise_sigma) : 0.0);
            }
        }
    }
    return ds;
}

namespace {

// 7x7 motif bank: oriented structures distinguishable by a local filter.
constexpr std::int64_t kMotifSide = 7;

void draw_motif(int motif, double* img, std::int64_t side, std::int64_t top, std::int64_t left,
                double intensity) {
    auto put = [&](std::int64_t r, std::int64_t c, double v) {
        const std::int64_t rr = top + r, cc = left + c;
        if (rr >= 0 && rr < side && cc >= 0 && cc < side) img[rr * side + cc] += v;
    };
    for (std::int64_t i = 0; i < kMotifSide; ++i) {
        switch (motif % 5) {
            case 0:  // horizontal bar
                put(3, i, intensity);
                put(2, i, intensity * 0.6);
                break;
            case 1:  // vertical bar
                put(i, 3, intensity);
                put(i, 4, intensity * 0.6);
                break;
            case 2:  // main diagonal
                put(i, i, intensity);
                if (i + 1 < kMotifSide) put(i + 1, i, intensity * 0.6);
                break;
            case 3:  // anti-diagonal
                put(i, kMotifSide - 1 - i, intensity);
                if (i + 1 < kMotifSide) put(i + 1, kMotifSide - 1 - i, intensity * 0.6);
                break;
            case 4:  // cross
                put(3, i, intensity);
                put(i, 3, intensity);
                break;
        }
    }
}

}  // namespace

Dataset synth_patterns(int num_classes, int per_class, std::int64_t side, double noise_sigma,
                       std::uint64_t seed) {
    if (num_classes <= 0 || per_class <= 0 || side < 16) {
        throw std::invalid_argument("synth_patterns: need positive counts and side >= 16");
    }
    SeedTree tree(seed);
    const std::int64_t dim = side * side;
    const std::int64_t n = static_cast<std::int64_t>(num_classes) * per_class;

    // Quadrant anchors; classes 2k / 2k+1 share a motif pair in swapped positions.
    const std::int64_t q1 = side / 7;
    const std::int64_t q2 = side - kMotifSide - side / 7;

    Dataset ds;
    ds.images = Tensor({n, 1, side, side});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.num_classes = num_classes;

    for (int c = 0; c < num_classes; ++c) {
        const int pair = c / 2;
        const int motif_a = pair % 5;
        const int motif_b = (pair + 1) % 5;
        const bool swapped = (c % 2) == 1;
        const int first = swapped ? motif_b : motif_a;
        const int second = swapped ? motif_a : motif_b;

        RngStream rs = tree.stream("pattern", static_cast<std::uint64_t>(c));
        for (int j = 0; j < per_class; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(c) * per_class + j;
            ds.labels[static_cast<std::size_t>(idx)] = c;
            double* img = ds.images.data() + idx * dim;
            std::fill_n(img, dim, 0.0);

            const std::int64_t j1r = rs.uniform_int(-3, 3), j1c = rs.uniform_int(-3, 3);
            const std::int64_t j2r = rs.uniform_int(-3, 3), j2c = rs.uniform_int(-3, 3);
            const double intensity = rs.uniform(0.6, 1.0);
            draw_motif(first, img, side, q1 + j1r, q1 + j1c, intensity);
            draw_motif(second, img, side, q2 + j2r, q2 + j2c, intensity);

            if (noise_sigma > 0) {
                for (std::int64_t i = 0; i < dim; ++i) img[i] += rs.normal(0.0, noise_sigma);
            }
            for (std::int64_t i = 0; i < dim; ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
        }
    }
    return ds;
}

void Partition::validate(std::int64_t dataset_size) const {
    std::vector<char> seen(static_cast<std::size_t>(dataset_size), 0);
    for (const auto& client : client_indices) {
        if (client.empty()) throw std::invalid_argument("Partition: empty client list");
        for (std::int64_t idx : client) {
            if (idx < 0 || idx >= dataset_size) {
                throw std::invalid_argument("Partition: index " + std::to_string(idx) + " out of range");
            }
            if (seen[static_cast<std::size_t>(idx)]++) {
                throw std::invalid_argument("Partition: duplicate index " + std::to_string(idx));
            }
        }
    }
}

Partition dirichlet_partition(const Dataset& dataset, int n_clients, double alpha,
                              std::uint64_t seed) {
    if (n_clients < 1) throw std::invalid_argument("dirichlet_partition: n_clients must be >= 1");
    if (!(alpha > 0)) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
    if (n_clients > dataset.size()) {
        throw std::invalid_argument("dirichlet_partition: n_clients " + std::to_string(n_clients) +
                                    " > dataset size " + std::to_string(dataset.size()));
    }

    SeedTree tree(seed);
    Partition part;
    part.alpha = alpha;
    part.seed = seed;
    part.client_indices.assign(static_cast<std::size_t>(n_clients), {});

    // Per-class index pools, shuffled deterministically.
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(dataset.num_classes));
    for (std::int64_t i = 0; i < dataset.size(); ++i) {
        by_class[static_cast<std::size_t>(dataset.labels[static_cast<std::size_t>(i)])].push_back(i);
    }

    for (int c = 0; c < dataset.num_classes; ++c) {
        auto& pool = by_class[static_cast<std::size_t>(c)];
        if (pool.empty()) continue;
        RngStream shuffle_rs = tree.stream("class-shuffle", static_cast<std::uint64_t>(c));
        shuffle_rs.shuffle(pool);

        // Dir(alpha) via normalized Gamma(alpha, 1) draws.
        RngStream dir_rs = tree.stream("dirichlet", static_cast<std::uint64_t>(c));
        std::vector<double> p(static_cast<std::size_t>(n_clients));
        double total = 0.0;
        for (auto& v : p) {
            v = dir_rs.gamma(alpha);
            total += v;
        }
        if (total <= 0) {
            std::fill(p.begin(), p.end(), 1.0);
            total = static_cast<double>(n_clients);
        }

        // Largest-remainder rounding preserves the exact class total.
        const std::int64_t m = static_cast<std::int64_t>(pool.size());
        std::vector<std::int64_t> counts(static_cast<std::size_t>(n_clients));
        std::vector<std::pair<double, int>> remainders;
        std::int64_t assigned = 0;
        for (int k = 0; k < n_clients; ++k) {
            const double exact = static_cast<double>(m) * p[static_cast<std::size_t>(k)] / total;
            counts[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(std::floor(exact));
            assigned += counts[static_cast<std::size_t>(k)];
            remainders.push_back({exact - std::floor(exact), k});
        }
        std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::int64_t i = 0; i < m - assigned; ++i) {
            counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(i)].second)]++;
        }

        std::size_t cursor = 0;
        for (int k = 0; k < n_clients; ++k) {
            for (std::int64_t i = 0; i < counts[static_cast<std::size_t>(k)]; ++i) {
                part.client_indices[static_cast<std::size_t>(k)].push_back(pool[cursor++]);
            }
        }
    }

    // Empty-client repair: move one sample from the largest client.
    for (std::size_t k = 0; k < part.client_indices.size(); ++k) {
        while (part.client_indices[k].empty()) {
            std::size_t largest = 0;
            for (std::size_t j = 1; j < part.client_indices.size(); ++j) {
                if (part.client_indices[j].size() > part.client_indices[largest].size()) largest = j;
            }
            if (part.client_indices[largest].size() <= 1) {
                throw std::runtime_error("dirichlet_partition: cannot repair empty client");
            }
            part.client_indices[k].push_back(part.client_indices[largest].back());
            part.client_indices[largest].pop_back();
        }
    }

    for (auto& client : part.client_indices) std::sort(client.begin(), client.end());
    part.validate(dataset.size());
    return part;
}

std::string partition_to_json(const Partition& p) {
    nlohmann::ordered_json j;
    j["alpha"] = p.alpha;
    j["seed"] = p.seed;
    j["n_clients"] = p.client_indices.size();
    j["clients"] = p.client_indices;
    return j.dump(2);
}

Partition partition_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    Partition p;
    p.alpha = j.at("alpha").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.client_indices = j.at("clients").get<std::vector<std::vector<std::int64_t>>>();
    return p;
}

}  // namespace fedgen
