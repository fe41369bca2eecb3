#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace ltmp {

/// Which token reduction runs inside each block, and in which order.
enum class ReductionOrder : unsigned {
    none = 0,
    ltmp = 1,         // threshold merge, then threshold prune
    ltpm = 2,         // threshold prune, then threshold merge
    merge_only = 3,
    prune_only = 4,
    topk_merge = 5,   // fixed-rate bipartite merging (ToMe)
    topk_prune = 6,
    topk_both = 7,    // fixed-rate merge, then fixed-rate prune
};

enum class ImportanceScore : unsigned {
    mean_column = 0,
    class_attention = 1,
};

/// How a merge source is folded into its destination.
enum class MergeWeighting : unsigned {
    size_weighted = 0,
    pairwise_mean = 1,
};

namespace detail {

inline constexpr std::array<std::pair<ReductionOrder, std::string_view>, 8> kReductionNames{{
    {ReductionOrder::none, "none"},
    {ReductionOrder::ltmp, "ltmp"},
    {ReductionOrder::ltpm, "ltpm"},
    {ReductionOrder::merge_only, "merge_only"},
    {ReductionOrder::prune_only, "prune_only"},
    {ReductionOrder::topk_merge, "topk_merge"},
    {ReductionOrder::topk_prune, "topk_prune"},
    {ReductionOrder::topk_both, "topk_both"},
}};

inline constexpr std::array<std::pair<ImportanceScore, std::string_view>, 2> kImportanceNames{{
    {ImportanceScore::mean_column, "mean_column"},
    {ImportanceScore::class_attention, "class_attention"},
}};

inline constexpr std::array<std::pair<MergeWeighting, std::string_view>, 2> kWeightingNames{{
    {MergeWeighting::size_weighted, "size_weighted"},
    {MergeWeighting::pairwise_mean, "pairwise_mean"},
}};

template <class Enum, std::size_t N>
std::string_view enum_name(const std::array<std::pair<Enum, std::string_view>, N>& table, Enum value) {
    for (const auto& [e, name] : table)
        if (e == value) return name;
    throw std::invalid_argument("unknown enum value");
}

template <class Enum, std::size_t N>
Enum enum_parse(const std::array<std::pair<Enum, std::string_view>, N>& table, std::string_view text,
                const char* what) {
    for (const auto& [e, name] : table)
        if (name == text) return e;
    throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(text) + "'");
}

}  // namespace detail

inline std::string_view to_string(ReductionOrder v) { return detail::enum_name(detail::kReductionNames, v); }
inline std::string_view to_string(ImportanceScore v) { return detail::enum_name(detail::kImportanceNames, v); }
inline std::string_view to_string(MergeWeighting v) { return detail::enum_name(detail::kWeightingNames, v); }

inline ReductionOrder parse_reduction_order(std::string_view s) {
    return detail::enum_parse(detail::kReductionNames, s, "reduction_order");
}
inline ImportanceScore parse_importance_score(std::string_view s) {
    return detail::enum_parse(detail::kImportanceNames, s, "importance_score");
}
inline MergeWeighting parse_merge_weighting(std::string_view s) {
    return detail::enum_parse(detail::kWeightingNames, s, "merge_weighting");
}

inline bool uses_merging(ReductionOrder o) {
    return o == ReductionOrder::ltmp || o == ReductionOrder::ltpm || o == ReductionOrder::merge_only ||
           o == ReductionOrder::topk_merge || o == ReductionOrder::topk_both;
}

inline bool uses_pruning(ReductionOrder o) {
    return o == ReductionOrder::ltmp || o == ReductionOrder::ltpm || o == ReductionOrder::prune_only ||
           o == ReductionOrder::topk_prune || o == ReductionOrder::topk_both;
}

inline bool is_topk(ReductionOrder o) {
    return o == ReductionOrder::topk_merge || o == ReductionOrder::topk_prune || o == ReductionOrder::topk_both;
}

/// Prune runs before merge only for LTPM.
inline bool prune_first(ReductionOrder o) { return o == ReductionOrder::ltpm; }

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t blocks = 4;
    std::size_t mlp_ratio = 4;
    std::size_t classes = 8;
    ReductionOrder reduction_order = ReductionOrder::ltmp;
    ImportanceScore importance_score = ImportanceScore::mean_column;
    MergeWeighting merge_weighting = MergeWeighting::size_weighted;
    std::size_t topk = 8;  // per-layer k for the fixed-rate modes

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patches() const { return grid() * grid(); }
    /// Patch tokens plus CLS.
    std::size_t tokens() const { return patches() + 1; }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t hidden_dim() const { return embed_dim * mlp_ratio; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            throw std::invalid_argument("image_size must be a positive multiple of patch_size");
        if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
            throw std::invalid_argument("embed_dim must be a positive multiple of heads");
        if (blocks == 0) throw std::invalid_argument("blocks must be >= 1");
        if (channels == 0 || classes == 0 || mlp_ratio == 0)
            throw std::invalid_argument("channels, classes and mlp_ratio must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace ltmp
