#pragma once

// Single-file checkpoint format: magic "DPCK", version, JSON manifest
// (component name, tensor names/shapes/dtypes, config hash, upstream
// digests), then all tensors as one little-endian f32 blob in manifest order.
// The blob digest (64-bit FNV-1a, hex) is what freeze-verification compares.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffprompt/nn.hpp"
#include "diffprompt/tensor.hpp"

namespace dp {

struct CheckpointMeta {
    std::string component;
    std::string config_hash;
    std::map<std::string, std::string> upstream_digests;  // component name -> blob digest
    std::map<std::string, std::string> extra;             // small free-form string fields
};

// Low-level named-tensor interface (used for trajectories and debugging).
void save_tensors(const std::string& path, const CheckpointMeta& meta,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors);
CheckpointMeta load_tensors(const std::string& path,
                            std::vector<std::pair<std::string, Tensor>>& out);

// Manifest without blob.
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Digest of the tensor blob as stored on disk.
std::string checkpoint_digest(const std::string& path);

// Digest of in-memory parameter values, byte-compatible with the digest the
// same ParamSet would produce on disk.
std::string params_digest(const ParamSetT<float>& params);

// ParamSet convenience wrappers. Loading requires every manifest tensor to
// match a registered parameter by name and shape, and vice versa.
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamSetT<float>& params);
CheckpointMeta load_checkpoint(const std::string& path, ParamSetT<float>& params);

}  // namespace dp
