#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedgen/tensor.hpp"

namespace fedgen {

struct Dataset {
    Tensor images;            // [N, C, H, W], values in [0, 1] for image data
    std::vector<int> labels;  // length N, in [0, num_classes)
    int num_classes = 0;

    std::int64_t size() const { return images.dim(0); }
    std::vector<std::int64_t> per_class_counts() const;

    /// Gathers rows by index into a fresh [B, C, H, W] batch plus labels.
    std::pair<Tensor, std::vector<int>> batch(const std::vector<std::int64_t>& indices) const;

    void validate() const;
};

/// Reads the IDX pair used by the MNIST family (big-endian magic 0x00000803
/// for images, 0x00000801 for labels); pixel bytes are scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Gaussian class clusters: per class a fixed mean pattern on a sphere in
/// pixel space, plus N(0, noise_sigma) pixel noise. Images are [N, 1, side, side].
Dataset synth_blobs(int num_classes, int per_class, std::int64_t side, double noise_sigma,
                    std::uint64_t seed);

/// Spatial-composition classes: each class places two small motifs at
/// class-specific quadrants (classes 2k and 2k+1 share the motif pair with
/// swapped positions), with per-sample jitter and pixel noise. Local texture
/// alone cannot separate paired classes; spatial arrangement can.
Dataset synth_patterns(int num_classes, int per_class, std::int64_t side, double noise_sigma,
                       std::uint64_t seed);

struct Partition {
    std::vector<std::vector<std::int64_t>> client_indices;
    double alpha = 0.0;
    std::uint64_t seed = 0;

    void validate(std::int64_t dataset_size) const;
};

/// Splits every class's sample indices across clients with proportions drawn
/// from Dir(alpha * 1) per class (largest-remainder rounding, empty clients
/// repaired by moving one sample from the largest client).
Partition dirichlet_partition(const Dataset& dataset, int n_clients, double alpha,
                              std::uint64_t seed);

std::string partition_to_json(const Partition& p);
Partition partition_from_json(const std::string& text);

}  // namespace fedgen
