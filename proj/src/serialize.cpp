#include "fedgen/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fedgen::io {

std::string dtype_name(DType d) { return d == DType::F64 ? "f64" : "f32"; }

DType dtype_from_name(const std::string& name) {
    if (name == "f64") return DType::F64;
    if (name == "f32") return DType::F32;
    throw std::invalid_argument("unknown dtype '" + name + "'");
}

int dtype_width(DType d) { return d == DType::F64 ? 8 : 4; }

void save_params(const ParamSet& params, const std::string& prefix, DType dtype) {
    nlohmann::ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["dtype"] = dtype_name(dtype);
    auto& tensors = manifest["tensors"] = nlohmann::ordered_json::object();

    std::ofstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write " + prefix + ".bin");
    std::int64_t offset = 0;
    for (const auto& [key, tensor] : params) {
        tensors[key] = {{"offset", offset}, {"shape", tensor.shape()}};
        if (dtype == DType::F64) {
            blob.write(reinterpret_cast<const char*>(tensor.data()),
                       static_cast<std::streamsize>(tensor.size() * 8));
            offset += tensor.size() * 8;
        } else {
            for (std::int64_t i = 0; i < tensor.size(); ++i) {
                const float v = static_cast<float>(tensor[i]);
                blob.write(reinterpret_cast<const char*>(&v), 4);
            }
            offset += tensor.size() * 4;
        }
    }
    if (!blob) throw std::runtime_error("write failed for " + prefix + ".bin");
    blob.close();
    write_file(prefix + ".manifest.json", manifest.dump(2) + "\n");
}

ParamSet load_params(const std::string& prefix) {
    const auto manifest = nlohmann::json::parse(read_file(prefix + ".manifest.json"));
    const DType dtype = dtype_from_name(manifest.at("dtype").get<std::string>());
    const std::string blob = read_file(prefix + ".bin");

    ParamSet params;
    for (const auto& [key, entry] : manifest.at("tensors").items()) {
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        const auto offset = entry.at("offset").get<std::int64_t>();
        Tensor t(shape);
        const std::int64_t bytes = t.size() * dtype_width(dtype);
        if (offset < 0 || offset + bytes > static_cast<std::int64_t>(blob.size())) {
            throw std::runtime_error("checkpoint blob truncated at '" + key + "'");
        }
        if (dtype == DType::F64) {
            std::memcpy(t.data(), blob.data() + offset, static_cast<std::size_t>(bytes));
        } else {
            for (std::int64_t i = 0; i < t.size(); ++i) {
                float v;
                std::memcpy(&v, blob.data() + offset + i * 4, 4);
                t[i] = static_cast<double>(v);
            }
        }
        params.emplace(key, std::move(t));
    }
    return params;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::uint64_t stable_json_hash(const nlohmann::json& j) {
    // nlohmann::json stores objects sorted by key, so dump() is canonical.
    const std::string text = nlohmann::json(j).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : text) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace fedgen::io
