#pragma once

#include <map>
#include <string>

#include "fedgen/layers.hpp"
#include "fedgen/tensor.hpp"

namespace fedgen {

/// Named, ordered map from layer identifiers to parameter tensors; the unit
/// exchanged between clients, server and hypernetworks. Keys sort
/// deterministically (std::map), e.g. "s01.l00.conv_w", "e02.fc_b".
using ParamSet = std::map<std::string, Tensor>;

std::string seg_key(int segment, int layer_in_segment, ParamRole role);
std::string exit_key(int exit_index, ParamRole role);

struct KeyInfo {
    bool is_exit = false;
    int segment = 0;  // exit index for exit keys
    int layer = 0;    // layer index within segment; 0 for exit keys
    ParamRole role;
};

KeyInfo parse_key(const std::string& key);

/// Restriction of `full` to the key set a tier-level client owns: backbone
/// segments 1..tier plus exit heads 1..tier. With `multi_exit` off the client
/// carries only its own final head (segments 1..tier, head == tier).
ParamSet subnetwork(const ParamSet& full, int tier, bool multi_exit = true);

std::int64_t total_size(const ParamSet& params);

/// Mean |a - b| over every tensor element of matching key sets; throws when
/// key sets differ.
double param_mean_abs_diff(const ParamSet& a, const ParamSet& b);

}  // namespace fedgen
