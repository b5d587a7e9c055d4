#pragma once

#include <string>
#include <vector>

#include "dri/config.hpp"
#include "dri/evaluation.hpp"
#include "dri/tensor.hpp"

namespace dri {

inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'I', '1'};

struct StoredTensor {
    std::string name;
    Tensor<float> tensor;
    bool trainable = false;

    /// Bitwise on the payload, so NaN patterns compare too.
    bool operator==(const StoredTensor& o) const;
};

/// Layout: magic "DRI1", u64 LE header length, key=value header text, then
/// the tensors as consecutive little-endian f32 in header order.
struct Checkpoint {
    std::vector<StoredTensor> tensors;
    /// Free-form key=value snapshot (a run config, or embedding metadata).
    KvDoc meta;

    const StoredTensor* find(const std::string& name) const;
    bool operator==(const Checkpoint& o) const { return tensors == o.tensors && meta.entries == o.meta.entries; }
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Every parameter and buffer of the store (buffers are stored as non-trainable).
Checkpoint snapshot(const ParameterStore<float>& store, const KvDoc& meta);

/// Copies stored values into matching store tensors and restores trainable
/// flags. Throws DataError naming every missing or mis-shaped tensor.
void restore(ParameterStore<float>& store, const Checkpoint& ckpt);

/// Embedding export: features in the container plus `<path>.csv` with
/// `key,id,modality` rows aligned to the feature rows.
void save_embeddings(const std::string& path, const EmbeddingSet& set, const KvDoc& meta);
EmbeddingSet load_embeddings(const std::string& path);

}  // namespace dri
