#include "uniap/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace uniap::io {

namespace {

constexpr char kMagic[8] = {'U', 'A', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<char*>(b), 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<char*>(b), 8);
}

std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f32_entry(std::ostream& os, const std::string& name,
                     const std::vector<int>& shape, std::span<const float> data) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(0));  // dtype f32
    os.put(static_cast<char>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<std::uint32_t>(d));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * 4));
}

void write_u64_entry(std::ostream& os, const std::string& name, std::uint64_t v) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(2));  // dtype u64
    os.put(static_cast<char>(1));
    write_u32(os, 1);
    write_u64(os, v);
}

}  // namespace

std::uint64_t fnv1a_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

void save_checkpoint(const std::string& path, model::ModelParams<float>& params,
                     const CheckpointMeta& meta) {
    auto flat = episodic::flatten_params(params);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kMagic, 8);
    write_u32(os, kFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(flat.size() + 4));
    write_u64_entry(os, "meta.config_hash", meta.config_hash);
    write_u64_entry(os, "meta.iteration", meta.iteration);
    write_u64_entry(os, "meta.rng_key", meta.rng_key);
    write_u64_entry(os, "meta.rng_counter", meta.rng_counter);
    for (auto& p : flat.all())
        write_f32_entry(os, p.name, p.tensor.shape(), p.tensor.value());
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

model::ModelParams<float> load_checkpoint(const std::string& path,
                                          const model::ModelConfig& cfg,
                                          std::uint64_t expect_config_hash,
                                          CheckpointMeta* meta_out, bool force) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    std::uint32_t version = read_u32(is);
    if (version != kFormatVersion)
        throw std::runtime_error("load_checkpoint: unsupported format version " +
                                 std::to_string(version));
    std::uint32_t count = read_u32(is);

    CheckpointMeta meta;
    std::map<std::string, std::vector<float>> tensors;
    std::map<std::string, std::vector<int>> shapes;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint16_t name_len = read_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        int dtype = is.get();
        int rank = is.get();
        std::vector<int> dims(rank);
        long long numel = 1;
        for (int i = 0; i < rank; ++i) {
            dims[i] = static_cast<int>(read_u32(is));
            numel *= dims[i];
        }
        if (dtype == 2) {
            std::uint64_t v = read_u64(is);
            if (name == "meta.config_hash") meta.config_hash = v;
            else if (name == "meta.iteration") meta.iteration = v;
            else if (name == "meta.rng_key") meta.rng_key = v;
            else if (name == "meta.rng_counter") meta.rng_counter = v;
        } else if (dtype == 0) {
            std::vector<float> data(numel);
            is.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(numel * 4));
            tensors[name] = std::move(data);
            shapes[name] = dims;
        } else {
            throw std::runtime_error("load_checkpoint: unknown dtype tag " +
                                     std::to_string(dtype) + " for " + name);
        }
        if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    }
    if (meta.config_hash != expect_config_hash && !force)
        throw std::invalid_argument(
            "load_checkpoint: config hash mismatch (use force to override)");

    auto params = model::init_params<float>(cfg, 0);
    auto flat = episodic::flatten_params(params);
    for (auto& p : flat.all()) {
        auto it = tensors.find(p.name);
        if (it == tensors.end())
            throw std::runtime_error("load_checkpoint: missing tensor " + p.name);
        if (shapes[p.name] != p.tensor.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name);
        auto v = p.tensor.mutable_value();
        std::copy(it->second.begin(), it->second.end(), v.begin());
    }
    if (meta_out) *meta_out = meta;
    return params;
}

}  // namespace uniap::io
