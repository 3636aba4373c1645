#pragma once

// Named-tensor persistence: a UTF-8 JSON manifest mapping each tensor name to
// {shape, dtype, byte_offset, byte_length}, next to a raw blob of little-endian
// elements laid out in manifest (alphabetical name) order. Extra top-level JSON
// fields (config snapshot, rng state) ride along in the manifest.

#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "dcmha/tensor.hpp"

namespace dcmha {

using json = nlohmann::json;

template <typename T>
void save_tensors(const std::string& manifest_path, const std::string& blob_path,
                  const std::map<std::string, Tensor<T>>& tensors, const json& extra = json::object()) {
    json manifest = extra;
    json entries = json::object();
    int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        int64_t bytes = t.numel() * static_cast<int64_t>(sizeof(T));
        entries[name] = {{"shape", t.shape()},
                         {"dtype", dtype_name<T>()},
                         {"byte_offset", offset},
                         {"byte_length", bytes}};
        offset += bytes;
    }
    manifest["tensors"] = entries;

    std::ofstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write manifest " + manifest_path);
    mf << manifest.dump(2) << "\n";

    std::ofstream bf(blob_path, std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write blob " + blob_path);
    for (const auto& [name, t] : tensors)
        bf.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(T));
}

template <typename T>
std::map<std::string, Tensor<T>> load_tensors(const std::string& manifest_path, const std::string& blob_path,
                                              json* extra_out = nullptr) {
    std::ifstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("cannot read manifest " + manifest_path);
    json manifest = json::parse(mf);
    if (extra_out) *extra_out = manifest;

    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw std::runtime_error("cannot read blob " + blob_path);

    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
        std::string dtype = entry.at("dtype");
        if (dtype != dtype_name<T>())
            throw std::runtime_error("tensor '" + name + "' has dtype " + dtype + ", expected " +
                                     dtype_name<T>());
        Shape shape = entry.at("shape").template get<Shape>();
        Tensor<T> t(shape);
        bf.seekg(entry.at("byte_offset").template get<int64_t>());
        bf.read(reinterpret_cast<char*>(t.data()), entry.at("byte_length").template get<int64_t>());
        if (!bf) throw std::runtime_error("blob " + blob_path + " truncated at tensor '" + name + "'");
        out.emplace(name, std::move(t));
    }
    return out;
}

inline std::string checkpoint_dtype(const std::string& manifest_path) {
    std::ifstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("cannot read manifest " + manifest_path);
    json manifest = json::parse(mf);
    for (const auto& [name, entry] : manifest.at("tensors").items()) return entry.at("dtype");
    return "float32";
}

}  // namespace dcmha
