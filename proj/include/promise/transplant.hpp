#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "promise/tensor_archive.hpp"
#include "promise/vit3d.hpp"

namespace promise {

// Source keys follow the SAM image-encoder naming, with or without an "image_encoder." prefix:
//   patch_embed.proj.{weight,bias}   -> patch_embed.spatial.*   (RGB kernel summed to one channel)
//   pos_embed                        -> patch_embed.pos_embed   (bilinear resize if grids differ)
//   blocks.{i}.{norm1,norm2}.*       -> blocks.{i}.{norm1,norm2}.*  (trainable)
//   blocks.{i}.attn.{qkv,proj}.*     -> blocks.{i}.attn.*           (frozen)
//   blocks.{i}.mlp.{lin1,lin2}.*     -> blocks.{i}.mlp.*            (frozen)
//   blocks.{i}.attn.rel_pos_{h,w}, neck.*  -> omitted

struct KeyMapping {
    std::string source;
    std::string target;    // empty when omitted
    std::string transform; // "copy", "sum_rgb_to_gray", "omit"
    std::string status;    // "mapped", "omitted", "missing", "shape_mismatch"
    std::vector<int64_t> source_shape;
    std::vector<int64_t> target_shape;
};

struct TransplantReport {
    std::vector<KeyMapping> entries;

    bool ok() const;
    nlohmann::json to_json() const;
};

/// Dry run: resolves every mapping and shape check without touching the encoder.
TransplantReport plan_transplant(const TensorArchive &checkpoint, const Vit3dEncoderImpl &encoder);

/// Imports the pretrained weights and returns the resulting freezing partition. Without
/// a checkpoint the encoder keeps its random initialisation; the partition is unchanged.
ParameterPartition transplant_pretrained(const std::optional<TensorArchive> &checkpoint, Vit3dEncoderImpl &encoder);

/// The source-model key naming for a target encoder parameter (inverse of the table above).
std::string source_key_for(const std::string &target_key);

/// Random weights with the source model's key names and shapes for the given geometry,
/// including keys that are omitted on import (rel-pos tables, neck).
TensorArchive make_random_source_checkpoint(const EncoderConfig &cfg, uint64_t seed);

} // namespace promise
