#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ltmp/config.hpp"
#include "ltmp/io.hpp"
#include "ltmp/model.hpp"
#include "ltmp/reduction.hpp"

namespace ltmp {

inline constexpr char kCheckpointMagic[4] = {'L', 'T', 'M', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::string metrics = "{}";   // JSON object text

    bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    VitParams<double> params;
    ThresholdSet thresholds;
    CheckpointMeta meta;
};

/// Fresh checkpoint: initialised weights, no-op thresholds.
inline Checkpoint make_checkpoint(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return Checkpoint{cfg, init_params<double>(cfg, rng), ThresholdSet::initial(cfg.blocks), CheckpointMeta{seed, 0, "{}"}};
}

/// FNV-1a over the raw bytes of every backbone parameter, in declaration order.
inline std::uint64_t params_checksum(const VitParams<double>& p) {
    std::uint64_t h = 1469598103934665603ull;
    p.visit([&](std::string_view, const Tensor<double>& t) {
        for (double v : t.values()) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    });
    return h;
}

namespace detail {

inline std::vector<std::uint32_t> config_fields(const ModelConfig& c) {
    return {static_cast<std::uint32_t>(c.image_size),  static_cast<std::uint32_t>(c.patch_size),
            static_cast<std::uint32_t>(c.channels),    static_cast<std::uint32_t>(c.embed_dim),
            static_cast<std::uint32_t>(c.heads),       static_cast<std::uint32_t>(c.blocks),
            static_cast<std::uint32_t>(c.mlp_ratio),   static_cast<std::uint32_t>(c.classes),
            static_cast<std::uint32_t>(c.reduction_order), static_cast<std::uint32_t>(c.importance_score),
            static_cast<std::uint32_t>(c.merge_weighting), static_cast<std::uint32_t>(c.topk)};
}

inline ModelConfig config_from_fields(const std::vector<std::uint32_t>& f) {
    ModelConfig c;
    c.image_size = f[0];
    c.patch_size = f[1];
    c.channels = f[2];
    c.embed_dim = f[3];
    c.heads = f[4];
    c.blocks = f[5];
    c.mlp_ratio = f[6];
    c.classes = f[7];
    if (f[8] > 7 || f[9] > 1 || f[10] > 1) throw std::runtime_error("checkpoint: bad enum field");
    c.reduction_order = static_cast<ReductionOrder>(f[8]);
    c.importance_score = static_cast<ImportanceScore>(f[9]);
    c.merge_weighting = static_cast<MergeWeighting>(f[10]);
    c.topk = f[11];
    return c;
}

inline constexpr std::size_t kConfigFieldCount = 12;

}  // namespace detail

/// Layout (all little-endian):
///   "LTMP" u32 version, 12 x u32 config fields,
///   u32 tensor count, per tensor: u32 rank, rank x u64 extents, f64 data,
///   u32 L, L x f64 merge, L x f64 prune, f64 tau,
///   u64 seed, u64 step, u64 length + metrics JSON bytes.
inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    for (auto f : detail::config_fields(ck.config)) w.u32(f);
    std::vector<const Tensor<double>*> tensors;
    ck.params.visit([&](std::string_view, const Tensor<double>& t) { tensors.push_back(&t); });
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto* t : tensors) {
        w.u32(static_cast<std::uint32_t>(t->rank()));
        for (auto e : t->shape()) w.u64(e);
        for (double v : t->values()) w.f64(v);
    }
    w.u32(static_cast<std::uint32_t>(ck.thresholds.blocks()));
    for (double v : ck.thresholds.merge) w.f64(v);
    for (double v : ck.thresholds.prune) w.f64(v);
    w.f64(ck.thresholds.tau);
    w.u64(ck.meta.seed);
    w.u64(ck.meta.step);
    w.u64(ck.meta.metrics.size());
    w.bytes(ck.meta.metrics.data(), ck.meta.metrics.size());
    return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> data) {
    detail::ByteReader r(std::move(data));
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
    if (auto v = r.u32(); v != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
    }
    std::vector<std::uint32_t> fields(detail::kConfigFieldCount);
    for (auto& f : fields) f = r.u32();
    Checkpoint ck;
    ck.config = detail::config_from_fields(fields);
    ck.config.validate();
    ck.params = zero_params<double>(ck.config);

    std::vector<Tensor<double>*> tensors;
    ck.params.visit([&](std::string_view, Tensor<double>& t) { tensors.push_back(&t); });
    if (r.u32() != tensors.size()) throw std::runtime_error("checkpoint: tensor count does not match config");
    for (auto* t : tensors) {
        Shape shape(r.u32());
        for (auto& e : shape) e = r.u64();
        if (shape != t->shape()) {
            throw std::runtime_error("checkpoint: tensor shape " + shape_string(shape) + " expected " +
                                     shape_string(t->shape()));
        }
        for (auto& v : t->values()) v = r.f64();
    }
    const std::uint32_t layers = r.u32();
    if (layers != ck.config.blocks) throw std::runtime_error("checkpoint: threshold count does not match config");
    ck.thresholds.merge.resize(layers);
    ck.thresholds.prune.resize(layers);
    for (auto& v : ck.thresholds.merge) v = r.f64();
    for (auto& v : ck.thresholds.prune) v = r.f64();
    ck.thresholds.tau = r.f64();
    ck.thresholds.validate();
    ck.meta.seed = r.u64();
    ck.meta.step = r.u64();
    ck.meta.metrics.resize(r.u64());
    r.bytes(ck.meta.metrics.data(), ck.meta.metrics.size());
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ck);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace ltmp
