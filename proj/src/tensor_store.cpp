// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/tensor_store.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace l2smerge {

namespace {

constexpr std::uint64_t max_header_bytes = 100ull << 20;
constexpr const char* metadata_key = "__metadata__";
constexpr const char* index_default_name = "model.safetensors.index.json";

class FileHandle {
public:
    explicit FileHandle(const fs::path& path) : fd_(::open(path.c_str(), O_RDONLY | O_CLOEXEC)) {
        if (fd_ < 0) throw IoError(fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    }
    ~FileHandle() {
        if (fd_ >= 0) ::close(fd_);
    }
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;

    void read_at(void* dst, std::uint64_t size, std::uint64_t offset, const fs::path& path) const {
        auto* out = static_cast<char*>(dst);
        while (size > 0) {
            ssize_t got = ::pread(fd_, out, size, static_cast<off_t>(offset));
            if (got < 0 && errno == EINTR) continue;
            if (got <= 0) throw IoError(fmt::format("short read from '{}'", path.string()));
            out += got;
            size -= static_cast<std::uint64_t>(got);
            offset += static_cast<std::uint64_t>(got);
        }
    }

private:
    int fd_;
};

std::uint64_t read_u64_le(const std::uint8_t* p) {
    std::uint64_t v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

TensorMeta parse_entry(const std::string& name, const json& entry, const fs::path& file) {
    auto fail = [&](const std::string& why) {
        return IoError(fmt::format("malformed header in '{}': tensor '{}': {}", file.string(), name, why));
    };
    if (!entry.is_object()) throw fail("entry is not an object");
    if (!entry.contains("dtype") || !entry["dtype"].is_string()) throw fail("missing dtype");
    auto dtype_str = entry["dtype"].get<std::string>();
    auto dtype = parse_dtype(dtype_str);
    if (!dtype) {
        throw IoError(fmt::format("unsupported dtype '{}' for tensor '{}' in '{}'", dtype_str, name, file.string()));
    }
    if (!entry.contains("shape") || !entry["shape"].is_array()) throw fail("missing shape");
    Shape shape;
    for (const auto& d : entry["shape"]) {
        if (!d.is_number_integer() || d.get<std::int64_t>() < 0) throw fail("shape must be non-negative integers");
        shape.push_back(d.get<std::int64_t>());
    }
    const auto& offs = entry.contains("data_offsets") ? entry["data_offsets"] : json();
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned()) {
        throw fail("data_offsets must be two non-negative integers");
    }
    TensorMeta meta{name, *dtype, shape, offs[0].get<std::uint64_t>(), offs[1].get<std::uint64_t>()};
    if (meta.end < meta.begin) throw fail("data_offsets end precedes start");
    std::size_t n;
    try {
        n = element_count(shape);
    } catch (const Error&) {
        throw fail("shape overflows");
    }
    if (meta.end - meta.begin != n * dtype_size(*dtype)) {
        throw fail(fmt::format("byte range {} does not match {} elements of {}", meta.end - meta.begin, n,
                               dtype_name(*dtype)));
    }
    return meta;
}

struct HeaderLayout {
    std::string header; ///< padded JSON
    std::vector<std::pair<const std::string*, DType>> order;
    std::uint64_t payload_bytes = 0;
};

HeaderLayout layout_header(const TensorMap& tensors, const DTypePolicy& policy) {
    HeaderLayout out;
    json header = json::object();
    if (!tensors.metadata.empty()) header[metadata_key] = tensors.metadata;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (name == metadata_key) throw ValidationError(fmt::format("tensor name '{}' collides with the metadata key", name));
        if (t.values.size() != element_count(t.shape)) {
            throw ValidationError(fmt::format("tensor '{}' holds {} values but shape implies {}", name,
                                              t.values.size(), element_count(t.shape)));
        }
        DType dt = policy.resolve(name, t.source_dtype);
        std::uint64_t bytes = t.values.size() * dtype_size(dt);
        header[name] = {{"dtype", dtype_name(dt)}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        out.order.emplace_back(&name, dt);
        offset += bytes;
    }
    out.header = header.dump();
    // Pad with spaces so the payload starts 8-byte aligned.
    while ((out.header.size() % 8) != 0) out.header.push_back(' ');
    out.payload_bytes = offset;
    return out;
}

void encode_tensor(const Tensor& t, DType dt, std::uint8_t* dst) {
    if (dt == DType::f32) {
        std::memcpy(dst, t.values.data(), t.values.size() * sizeof(float));
        return;
    }
    for (std::size_t i = 0; i < t.values.size(); ++i) {
        std::uint16_t b = fp32_to_bf16(t.values[i]);
        std::memcpy(dst + 2 * i, &b, 2);
    }
}

void decode_tensor(const std::uint8_t* src, DType dt, std::span<float> out) {
    if (dt == DType::f32) {
        std::memcpy(out.data(), src, out.size() * sizeof(float));
        return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t b;
        std::memcpy(&b, src + 2 * i, 2);
        out[i] = bf16_to_fp32(b);
    }
}

std::optional<fs::path> find_index(const fs::path& dir) {
    if (fs::exists(dir / index_default_name)) return dir / index_default_name;
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto fname = e.path().filename().string();
        if (e.is_regular_file() && fname.size() > 11 && fname.ends_with(".index.json")) found.push_back(e.path());
    }
    if (found.empty()) return std::nullopt;
    if (found.size() > 1) throw IoError(fmt::format("multiple index files in '{}'", dir.string()));
    return found.front();
}

} // namespace

std::size_t dtype_size(DType dtype) { return dtype == DType::bf16 ? 2 : 4; }

std::string_view dtype_name(DType dtype) { return dtype == DType::bf16 ? "BF16" : "F32"; }

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "BF16" || name == "bf16") return DType::bf16;
    if (name == "F32" || name == "f32" || name == "fp32" || name == "FP32") return DType::f32;
    return std::nullopt;
}

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ValidationError("negative dimension in shape");
        auto ud = static_cast<std::size_t>(d);
        if (ud != 0 && n > std::numeric_limits<std::size_t>::max() / 8 / ud) {
            throw ValidationError("shape element count overflows");
        }
        n *= ud;
    }
    return n;
}

Tensor::Tensor(Shape s, std::vector<float> v, DType src) : shape(std::move(s)), source_dtype(src), values(std::move(v)) {
    if (values.size() != element_count(shape)) {
        throw ValidationError(fmt::format("tensor value count {} does not match shape ({} elements)", values.size(),
                                          element_count(shape)));
    }
}

std::size_t Tensor::rows() const { return shape.empty() ? 1 : static_cast<std::size_t>(shape.front()); }

std::size_t Tensor::cols() const {
    std::size_t n = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) n *= static_cast<std::size_t>(shape[i]);
    return n;
}

const Tensor& TensorMap::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValidationError(fmt::format("missing tensor '{}'", name));
    return it->second;
}

Tensor& TensorMap::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValidationError(fmt::format("missing tensor '{}'", name));
    return it->second;
}

void TensorMap::insert(std::string name, Tensor tensor) {
    auto [it, ok] = tensors_.emplace(std::move(name), std::move(tensor));
    if (!ok) throw ValidationError(fmt::format("duplicate tensor name '{}'", it->first));
}

std::vector<std::string> TensorMap::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) out.push_back(name);
    return out;
}

std::size_t TensorMap::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
}

DType DTypePolicy::resolve(const std::string& name, DType source) const {
    for (const auto& rule : rules) {
        if (glob_match(rule.pattern, name)) return rule.dtype;
    }
    return fallback.value_or(source);
}

ContainerHeader read_header(const fs::path& file) {
    std::error_code ec;
    auto file_size = fs::file_size(file, ec);
    if (ec) throw IoError(fmt::format("cannot stat '{}': {}", file.string(), ec.message()));
    if (file_size < 8) throw IoError(fmt::format("malformed header in '{}': file shorter than 8 bytes", file.string()));

    FileHandle fh(file);
    std::uint8_t prefix[8];
    fh.read_at(prefix, 8, 0, file);
    const std::uint64_t n = read_u64_le(prefix);
    if (n > max_header_bytes || n > file_size - 8) {
        throw IoError(fmt::format("malformed header in '{}': header length {} exceeds file", file.string(), n));
    }
    std::string text(n, '\0');
    fh.read_at(text.data(), n, 8, file);

    json header;
    try {
        header = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(fmt::format("malformed header in '{}': {}", file.string(), e.what()));
    }
    if (!header.is_object()) throw IoError(fmt::format("malformed header in '{}': not a JSON object", file.string()));

    ContainerHeader out;
    out.header_bytes = n;
    out.payload_bytes = file_size - 8 - n;
    for (const auto& [key, value] : header.items()) {
        if (key == metadata_key) {
            if (!value.is_object()) throw IoError(fmt::format("malformed header in '{}': bad __metadata__", file.string()));
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) {
                    throw IoError(fmt::format("malformed header in '{}': metadata '{}' is not a string", file.string(), mk));
                }
                out.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        out.tensors.push_back(parse_entry(key, value, file));
    }

    for (const auto& m : out.tensors) {
        if (m.end > out.payload_bytes) {
            throw IoError(fmt::format("malformed header in '{}': tensor '{}' ends past the payload", file.string(), m.name));
        }
    }
    std::vector<const TensorMeta*> by_offset;
    for (const auto& m : out.tensors) by_offset.push_back(&m);
    std::sort(by_offset.begin(), by_offset.end(), [](auto* a, auto* b) {
        return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
    });
    const TensorMeta* furthest = nullptr;
    for (const auto* cur : by_offset) {
        if (cur->end == cur->begin) continue; // empty ranges cannot overlap
        if (furthest && cur->begin < furthest->end) {
            throw IoError(fmt::format("overlapping byte ranges in '{}': '{}' and '{}'", file.string(), furthest->name,
                                      cur->name));
        }
        if (!furthest || cur->end > furthest->end) furthest = cur;
    }
    // json objects iterate in key order, so tensors are already lexicographic.
    return out;
}

std::size_t CheckpointManifest::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += element_count(e.meta.shape);
    return n;
}

CheckpointManifest read_manifest(const fs::path& path) {
    CheckpointManifest out;
    if (!fs::exists(path)) throw IoError(fmt::format("checkpoint '{}' does not exist", path.string()));

    std::vector<fs::path> files;
    std::map<std::string, std::string> weight_map;
    bool indexed = false;
    if (fs::is_directory(path)) {
        if (auto index = find_index(path)) {
            std::ifstream in(*index);
            json doc;
            try {
                doc = json::parse(in);
            } catch (const json::parse_error& e) {
                throw IoError(fmt::format("malformed index '{}': {}", index->string(), e.what()));
            }
            if (!doc.contains("weight_map") || !doc["weight_map"].is_object()) {
                throw IoError(fmt::format("malformed index '{}': missing weight_map", index->string()));
            }
            std::set<std::string> shards;
            for (const auto& [name, shard] : doc["weight_map"].items()) {
                if (!shard.is_string()) throw IoError(fmt::format("malformed index '{}': shard for '{}'", index->string(), name));
                weight_map[name] = shard.get<std::string>();
                shards.insert(shard.get<std::string>());
            }
            for (const auto& s : shards) {
                if (!fs::exists(path / s)) {
                    throw IoError(fmt::format("shard '{}' listed in index '{}' is missing", s, index->string()));
                }
                files.push_back(path / s);
            }
            indexed = true;
        } else {
            for (const auto& e : fs::directory_iterator(path)) {
                if (e.is_regular_file() && e.path().extension() == ".safetensors") files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            if (files.empty()) throw IoError(fmt::format("no checkpoint files in '{}'", path.string()));
        }
    } else {
        files.push_back(path);
    }

    std::map<std::string, CheckpointManifest::Entry> all;
    for (const auto& f : files) {
        auto header = read_header(f);
        for (auto& m : header.tensors) {
            if (all.count(m.name)) {
                throw IoError(fmt::format("tensor '{}' appears in more than one shard ('{}')", m.name, f.string()));
            }
            all.emplace(m.name, CheckpointManifest::Entry{m, f});
        }
    }
    if (indexed) {
        for (const auto& [name, shard] : weight_map) {
            auto it = all.find(name);
            if (it == all.end()) {
                throw IoError(fmt::format("tensor '{}' listed in index is missing from shard '{}'", name, shard));
            }
            if (it->second.file.filename() != fs::path(shard).filename()) {
                throw IoError(fmt::format("tensor '{}' found in '{}' but index maps it to '{}'", name,
                                          it->second.file.filename().string(), shard));
            }
        }
    }
    for (auto& [_, e] : all) out.entries.push_back(std::move(e));
    return out;
}

TensorMap load_checkpoint(const fs::path& path, const std::function<bool(const std::string&)>& select) {
    auto manifest = read_manifest(path);
    if (select) {
        std::erase_if(manifest.entries, [&](const CheckpointManifest::Entry& e) { return !select(e.meta.name); });
    }

    std::map<fs::path, std::unique_ptr<FileHandle>> handles;
    std::map<fs::path, std::uint64_t> payload_start;
    std::map<std::string, std::string> metadata;
    for (const auto& e : manifest.entries) {
        if (!handles.count(e.file)) {
            handles.emplace(e.file, std::make_unique<FileHandle>(e.file));
        }
    }
    for (const auto& [file, _] : handles) {
        auto header = read_header(file);
        payload_start[file] = 8 + header.header_bytes;
        for (auto& [k, v] : header.metadata) metadata.emplace(k, v);
    }
    // Directories with no tensors still carry a header per file.
    if (manifest.entries.empty() && fs::is_regular_file(path)) {
        metadata = read_header(path).metadata;
    }

    std::vector<Tensor> loaded(manifest.entries.size());
    parallel_for(manifest.entries.size(), [&](std::size_t i) {
        const auto& e = manifest.entries[i];
        const auto& m = e.meta;
        Tensor t;
        t.shape = m.shape;
        t.source_dtype = m.dtype;
        t.values.resize(element_count(m.shape));
        std::vector<std::uint8_t> raw(m.end - m.begin);
        handles.at(e.file)->read_at(raw.data(), raw.size(), payload_start.at(e.file) + m.begin, e.file);
        decode_tensor(raw.data(), m.dtype, t.values);
        loaded[i] = std::move(t);
    });

    TensorMap out;
    out.metadata = std::move(metadata);
    for (std::size_t i = 0; i < loaded.size(); ++i) out.insert(manifest.entries[i].meta.name, std::move(loaded[i]));
    return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const TensorMap& tensors, const DTypePolicy& policy) {
    auto layout = layout_header(tensors, policy);
    std::vector<std::uint8_t> out(8 + layout.header.size() + layout.payload_bytes);
    const std::uint64_t n = layout.header.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, layout.header.data(), n);
    std::uint8_t* cursor = out.data() + 8 + n;
    for (const auto& [name, dt] : layout.order) {
        const auto& t = tensors.at(*name);
        encode_tensor(t, dt, cursor);
        cursor += t.values.size() * dtype_size(dt);
    }
    return out;
}

void write_checkpoint(const TensorMap& tensors, const fs::path& file, const DTypePolicy& policy) {
    auto layout = layout_header(tensors, policy);
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write '{}'", file.string()));
    const std::uint64_t n = layout.header.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(layout.header.data(), static_cast<std::streamsize>(n));
    std::vector<std::uint8_t> buf;
    for (const auto& [name, dt] : layout.order) {
        const auto& t = tensors.at(*name);
        buf.resize(t.values.size() * dtype_size(dt));
        encode_tensor(t, dt, buf.data());
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    out.flush();
    if (!out) throw IoError(fmt::format("write to '{}' failed", file.string()));
}

std::vector<fs::path> write_checkpoint_dir(const TensorMap& tensors, const fs::path& dir, const DTypePolicy& policy,
                                           std::uint64_t max_shard_bytes) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));

    // Greedy packing in name order.
    std::vector<std::vector<std::string>> shards(1);
    std::uint64_t current = 0;
    for (const auto& [name, t] : tensors) {
        std::uint64_t bytes = t.numel() * dtype_size(policy.resolve(name, t.source_dtype));
        if (max_shard_bytes != 0 && current > 0 && current + bytes > max_shard_bytes) {
            shards.emplace_back();
            current = 0;
        }
        shards.back().push_back(name);
        current += bytes;
    }

    std::vector<fs::path> written;
    if (shards.size() == 1) {
        auto file = dir / "model.safetensors";
        write_checkpoint(tensors, file, policy);
        written.push_back(file);
        return written;
    }

    json weight_map = json::object();
    std::uint64_t total = 0;
    for (std::size_t s = 0; s < shards.size(); ++s) {
        TensorMap part;
        part.metadata = tensors.metadata;
        for (const auto& name : shards[s]) {
            part.insert(name, tensors.at(name));
            total += tensors.at(name).numel() * dtype_size(policy.resolve(name, tensors.at(name).source_dtype));
        }
        auto fname = fmt::format("model-{:05d}-of-{:05d}.safetensors", s + 1, shards.size());
        write_checkpoint(part, dir / fname, policy);
        written.push_back(dir / fname);
        for (const auto& name : shards[s]) weight_map[name] = fname;
    }
    json index = {{"metadata", {{"total_size", total}}}, {"weight_map", weight_map}};
    std::ofstream out(dir / index_default_name);
    out << index.dump(2) << "\n";
    if (!out) throw IoError(fmt::format("cannot write index in '{}'", dir.string()));
    written.push_back(dir / index_default_name);
    return written;
}

std::uint64_t manifest_fingerprint(const TensorMap& tensors) {
    std::uint64_t h = fnv1a64_offset;
    for (const auto& [name, t] : tensors) {
        h = fnv1a64(name, h);
        h = fnv1a64("|", h);
        for (auto d : t.shape) h = fnv1a64(std::to_string(d) + ",", h);
        h = fnv1a64(";", h);
    }
    return h;
}

std::uint64_t content_fingerprint(const TensorMap& tensors) {
    std::vector<const Tensor*> order;
    for (const auto& [_, t] : tensors) order.push_back(&t);
    std::vector<std::uint64_t> per(order.size());
    parallel_for(order.size(), [&](std::size_t i) {
        const auto& v = order[i]->values;
        per[i] = fnv1a64_bytes({reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float)});
    });
    std::uint64_t h = manifest_fingerprint(tensors);
    for (auto p : per) {
        h = fnv1a64_bytes({reinterpret_cast<const std::uint8_t*>(&p), sizeof(p)}, h);
    }
    return h;
}

std::string fingerprint_hex(std::uint64_t fp) { return fmt::format("{:016x}", fp); }

} // namespace l2smerge
