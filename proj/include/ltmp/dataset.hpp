#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltmp/config.hpp"
#include "ltmp/io.hpp"
#include "ltmp/rng.hpp"
#include "ltmp/tensor.hpp"

namespace ltmp {

inline constexpr char kDatasetMagic[4] = {'L', 'T', 'D', 'S'};
inline constexpr std::size_t kPatternKinds = 4;  // solid, horizontal stripes, vertical stripes, checker
inline constexpr std::size_t kColorFamilies = 2; // warm, cool
inline constexpr std::size_t kMaxSynthClasses = kPatternKinds * kColorFamilies;

enum class Split : std::uint64_t { train = 1, val = 2 };

struct SynthDatasetSpec {
    std::size_t classes = 8;
    std::size_t image_size = 32;
    std::size_t samples = 1024;
    double noise = 0.05;   // pixel noise stddev as a fraction of full scale
    std::uint64_t seed = 0;
    Split split = Split::train;

    void validate() const {
        if (classes == 0 || classes > kMaxSynthClasses)
            throw std::invalid_argument("dataset: classes must be in [1, 8]");
        if (image_size < 8) throw std::invalid_argument("dataset: image_size must be >= 8");
        if (!(noise >= 0.0) || !std::isfinite(noise)) throw std::invalid_argument("dataset: noise must be >= 0");
    }
};

/// u8 RGB images with u16 labels.
struct Dataset {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<std::uint8_t> pixels;   // count * H * W * C, row-major HWC per image
    std::vector<std::uint16_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::size_t image_bytes() const noexcept { return height * width * channels; }

    std::span<const std::uint8_t> raw(std::size_t i) const {
        return std::span<const std::uint8_t>(pixels).subspan(i * image_bytes(), image_bytes());
    }

    /// Image i as [H x W x C] scaled to [-1, 1].
    Tensor<double> image(std::size_t i) const {
        if (i >= size()) throw std::out_of_range("dataset: index " + std::to_string(i));
        Tensor<double> out({height, width, channels});
        const auto px = raw(i);
        for (std::size_t k = 0; k < px.size(); ++k) out[k] = static_cast<double>(px[k]) / 127.5 - 1.0;
        return out;
    }

    bool operator==(const Dataset&) const = default;
};

/// Fill pattern and colour family for a label.
struct SynthLabel {
    std::size_t pattern;
    std::size_t color;
};

inline SynthLabel decode_label(std::size_t label) { return {label / kColorFamilies, label % kColorFamilies}; }

namespace detail {

/// Whether pixel (x, y) takes the foreground colour under a fill pattern.
inline bool pattern_on(std::size_t pattern, std::size_t x, std::size_t y) {
    switch (pattern) {
        case 0: return true;
        case 1: return y % 2 == 0;
        case 2: return x % 2 == 0;
        default: return (x + y) % 2 == 0;
    }
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l)); }

}  // namespace detail

/// Draws one image of the given label into `out` (H x W x 3 bytes).
inline void draw_synth_image(std::size_t label, std::size_t size, double noise, Rng& rng, std::uint8_t* out) {
    const auto [pattern, color] = decode_label(label);
    const double s = static_cast<double>(size);
    const double r = rng.uniform(0.22, 0.36) * s;
    const double cx = rng.uniform(r, s - r);
    const double cy = rng.uniform(r, s - r);
    std::array<double, 3> fg;
    if (color == 0) {
        fg = {rng.uniform(190, 255), rng.uniform(60, 170), rng.uniform(0, 60)};
    } else {
        fg = {rng.uniform(0, 60), rng.uniform(90, 200), rng.uniform(190, 255)};
    }
    // Background: per-channel linear ramps in random directions.
    std::array<double, 3> bg, gx, gy;
    for (std::size_t c = 0; c < 3; ++c) {
        bg[c] = rng.uniform(40, 110);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double slope = rng.uniform(20.0, 80.0) / s;
        gx[c] = slope * std::cos(angle);
        gy[c] = slope * std::sin(angle);
    }
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const bool in = dx * dx + dy * dy <= r * r;
            const bool on = in && detail::pattern_on(pattern, x, y);
            for (std::size_t c = 0; c < 3; ++c) {
                const double back = bg[c] + gx[c] * (static_cast<double>(x) - s / 2) +
                                    gy[c] * (static_cast<double>(y) - s / 2);
                const double base = on ? fg[c] : in ? 0.3 * fg[c] : back;
                *out++ = detail::to_byte(base + 255.0 * noise * rng.normal());
            }
        }
}

/// Deterministic in (seed, split); the two splits use independent generator streams.
inline Dataset generate_dataset(const SynthDatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.height = ds.width = spec.image_size;
    ds.channels = 3;
    ds.pixels.resize(spec.samples * ds.image_bytes());
    ds.labels.resize(spec.samples);
    Rng rng(spec.seed, static_cast<std::uint64_t>(spec.split));
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const auto label = static_cast<std::size_t>(rng.below(spec.classes));
        ds.labels[i] = static_cast<std::uint16_t>(label);
        draw_synth_image(label, spec.image_size, spec.noise, rng, ds.pixels.data() + i * ds.image_bytes());
    }
    return ds;
}

/// Pearson chi-square statistic of the label histogram against uniform.
inline double label_chi_square(const Dataset& ds, std::size_t classes) {
    if (ds.empty() || classes == 0) return 0.0;
    std::vector<double> counts(classes, 0.0);
    for (auto l : ds.labels) counts.at(l) += 1.0;
    const double expected = static_cast<double>(ds.size()) / static_cast<double>(classes);
    double chi = 0;
    for (double c : counts) chi += (c - expected) * (c - expected) / expected;
    return chi;
}

/// Layout: "LTDS", u32 count, u32 H, u32 W, u32 C, count*H*W*C u8 pixels, count u16 labels (little-endian).
inline std::vector<char> encode_dataset(const Dataset& ds) {
    detail::ByteWriter w;
    w.bytes(kDatasetMagic, 4);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.height));
    w.u32(static_cast<std::uint32_t>(ds.width));
    w.u32(static_cast<std::uint32_t>(ds.channels));
    w.bytes(ds.pixels.data(), ds.pixels.size());
    for (auto l : ds.labels) w.bytes(&l, 2);
    return w.buffer();
}

inline Dataset decode_dataset(std::vector<char> data) {
    detail::ByteReader r(std::move(data));
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw std::runtime_error("dataset: bad magic");
    Dataset ds;
    const std::size_t count = r.u32();
    ds.height = r.u32();
    ds.width = r.u32();
    ds.channels = r.u32();
    ds.pixels.resize(count * ds.image_bytes());
    r.bytes(ds.pixels.data(), ds.pixels.size());
    ds.labels.resize(count);
    for (auto& l : ds.labels) r.bytes(&l, 2);
    if (!r.done()) throw std::runtime_error("dataset: trailing bytes");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    const auto bytes = encode_dataset(ds);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

inline Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(detail::read_file(path)); }

/// Fails unless images in `ds` fit the model's input.
inline void check_dataset_matches(const Dataset& ds, const ModelConfig& cfg) {
    if (ds.height != cfg.image_size || ds.width != cfg.image_size || ds.channels != cfg.channels) {
        throw std::invalid_argument("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                                    "x" + std::to_string(ds.channels) + " but the model expects " +
                                    std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                                    std::to_string(cfg.channels));
    }
    for (auto l : ds.labels)
        if (l >= cfg.classes) throw std::invalid_argument("dataset label " + std::to_string(l) + " exceeds model classes");
}

}  // namespace ltmp
