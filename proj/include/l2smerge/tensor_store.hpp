// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace l2smerge {

enum class DType { bf16, f32 };

std::size_t dtype_size(DType dtype);
/// On-disk spelling: "BF16" / "F32".
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);

/// Lossless widening.
inline float bf16_to_fp32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

/// Round-to-nearest-even narrowing. NaN stays NaN (quiet, sign kept).
inline std::uint16_t fp32_to_bf16(float value) {
    auto bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7F800000u) == 0x7F800000u && (bits & 0x007FFFFFu) != 0) {
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    return static_cast<std::uint16_t>(bits >> 16);
}

using Shape = std::vector<std::int64_t>;

/// Product of dims; throws on negative dims or overflow.
std::size_t element_count(const Shape& shape);

/// One tensor as described by a container header.
struct TensorMeta {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::uint64_t begin = 0; ///< offset into the payload
    std::uint64_t end = 0;
};

/// Dense FP32 tensor. `source_dtype` remembers what it was stored as.
struct Tensor {
    Shape shape;
    DType source_dtype = DType::f32;
    std::vector<float> values;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> v, DType src = DType::f32);

    std::size_t numel() const { return values.size(); }
    bool is_matrix() const { return shape.size() == 2; }
    /// Leading dimension (1 for scalars).
    std::size_t rows() const;
    /// Product of the trailing dimensions.
    std::size_t cols() const;
    std::span<const float> row(std::size_t i) const { return {values.data() + i * cols(), cols()}; }
    std::span<float> row(std::size_t i) { return {values.data() + i * cols(), cols()}; }
};

/// In-memory checkpoint. Names iterate lexicographically.
class TensorMap {
public:
    using Storage = std::map<std::string, Tensor>;

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    /// Throws ValidationError on duplicate names.
    void insert(std::string name, Tensor tensor);
    void insert_or_assign(std::string name, Tensor tensor) { tensors_.insert_or_assign(std::move(name), std::move(tensor)); }

    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }
    std::vector<std::string> names() const;
    std::size_t parameter_count() const;

    Storage::const_iterator begin() const { return tensors_.begin(); }
    Storage::const_iterator end() const { return tensors_.end(); }
    Storage::iterator begin() { return tensors_.begin(); }
    Storage::iterator end() { return tensors_.end(); }

    /// String map stored under "__metadata__"; copied through untouched.
    std::map<std::string, std::string> metadata;

private:
    Storage tensors_;
};

/// Maps tensor names to an output dtype. First matching glob wins; with no
/// match the fallback applies, or the tensor's source dtype if none is set.
struct DTypePolicy {
    struct Rule {
        std::string pattern;
        DType dtype;
    };
    std::vector<Rule> rules;
    std::optional<DType> fallback;

    DType resolve(const std::string& name, DType source) const;

    static DTypePolicy keep_source() { return {}; }
    static DTypePolicy all(DType dtype) { return {{}, dtype}; }
};

/// Header of a single container file.
struct ContainerHeader {
    std::vector<TensorMeta> tensors; ///< lexicographic by name
    std::map<std::string, std::string> metadata;
    std::uint64_t header_bytes = 0; ///< JSON length N (without the 8-byte prefix)
    std::uint64_t payload_bytes = 0;
};

/// Parses and validates the header of one container file.
ContainerHeader read_header(const std::filesystem::path& file);

/// Tensor metadata across a checkpoint (file, or directory with an index).
struct CheckpointManifest {
    struct Entry {
        TensorMeta meta;
        std::filesystem::path file;
    };
    std::vector<Entry> entries; ///< lexicographic by name
    std::size_t parameter_count() const;
};

CheckpointManifest read_manifest(const std::filesystem::path& path);

/// Loads every tensor as FP32. `path` is a container file, or a directory
/// holding either an index file ("*.index.json" with a weight_map) or
/// container files directly. `select`, when set, limits loading to the names it accepts.
TensorMap load_checkpoint(const std::filesystem::path& path,
                          const std::function<bool(const std::string&)>& select = {});

/// Serializes to the container format in memory.
std::vector<std::uint8_t> serialize_checkpoint(const TensorMap& tensors, const DTypePolicy& policy);

/// Writes one container file.
void write_checkpoint(const TensorMap& tensors, const std::filesystem::path& file, const DTypePolicy& policy);

/// Writes into `dir`: a single "model.safetensors" when everything fits in
/// `max_shard_bytes` (0 = unlimited), otherwise numbered shards plus
/// "model.safetensors.index.json". Returns the files written.
std::vector<std::filesystem::path> write_checkpoint_dir(const TensorMap& tensors, const std::filesystem::path& dir,
                                                        const DTypePolicy& policy, std::uint64_t max_shard_bytes = 0);

/// Name + shape manifest hash (FNV-1a 64).
std::uint64_t manifest_fingerprint(const TensorMap& tensors);
/// Hash over names, shapes and FP32 bits.
std::uint64_t content_fingerprint(const TensorMap& tensors);

std::string fingerprint_hex(std::uint64_t fp);

} // namespace l2smerge
