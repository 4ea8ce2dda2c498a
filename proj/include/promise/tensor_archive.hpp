#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

namespace promise {

/// Named-tensor archive in the safetensors layout: an 8-byte little-endian header
/// length, a JSON header {name: {dtype, shape, data_offsets}, "__metadata__": {...}}
/// and the concatenated raw tensor bytes. Supports F32, F64, I64, U8.
struct TensorArchive {
    std::map<std::string, torch::Tensor> tensors;
    std::map<std::string, std::string> metadata;

    bool contains(const std::string &key) const { return tensors.count(key) != 0; }
    const torch::Tensor &at(const std::string &key) const;
};

TensorArchive load_tensor_archive(const std::filesystem::path &path);
void save_tensor_archive(const TensorArchive &archive, const std::filesystem::path &path);

std::string serialize_tensor_archive(const TensorArchive &archive);
TensorArchive parse_tensor_archive(const std::string &bytes);

} // namespace promise
