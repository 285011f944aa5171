#include "fedgen/params.hpp"

#include <cstdio>
#include <stdexcept>

namespace fedgen {

std::string seg_key(int segment, int layer_in_segment, ParamRole role) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%02d.l%02d.", segment, layer_in_segment);
    return std::string(buf) + role_name(role);
}

std::string exit_key(int exit_index, ParamRole role) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "e%02d.", exit_index);
    return std::string(buf) + role_name(role);
}

KeyInfo parse_key(const std::string& key) {
    KeyInfo info;
    if (key.size() >= 5 && key[0] == 'e') {
        info.is_exit = true;
        info.segment = std::stoi(key.substr(1, 2));
        info.role = role_from_name(key.substr(4));
        return info;
    }
    if (key.size() >= 9 && key[0] == 's' && key[4] == 'l') {
        info.is_exit = false;
        info.segment = std::stoi(key.substr(1, 2));
        info.layer = std::stoi(key.substr(5, 2));
        info.role = role_from_name(key.substr(8));
        return info;
    }
    throw std::invalid_argument("parse_key: malformed parameter key '" + key + "'");
}

ParamSet subnetwork(const ParamSet& full, int tier, bool multi_exit) {
    ParamSet out;
    for (const auto& [key, tensor] : full) {
        const KeyInfo info = parse_key(key);
        if (info.is_exit) {
            const bool keep = multi_exit ? info.segment <= tier : info.segment == tier;
            if (keep) out.emplace(key, tensor);
        } else if (info.segment <= tier) {
            out.emplace(key, tensor);
        }
    }
    return out;
}

std::int64_t total_size(const ParamSet& params) {
    std::int64_t n = 0;
    for (const auto& [key, tensor] : params) n += tensor.size();
    return n;
}

double param_mean_abs_diff(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("param_mean_abs_diff: key count mismatch");
    }
    double sum = 0.0;
    std::int64_t n = 0;
    auto ib = b.begin();
    for (const auto& [key, ta] : a) {
        if (ib->first != key) throw std::invalid_argument("param_mean_abs_diff: key mismatch at '" + key + "'");
        const Tensor& tb = ib->second;
        if (!ta.same_shape(tb)) throw std::invalid_argument("param_mean_abs_diff: shape mismatch at '" + key + "'");
        for (std::int64_t i = 0; i < ta.size(); ++i) sum += std::abs(ta[i] - tb[i]);
        n += ta.size();
        ++ib;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace fedgen
