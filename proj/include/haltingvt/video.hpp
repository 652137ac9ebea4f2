#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "haltingvt/layers.hpp"

namespace haltingvt {

class VideoError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Frame stack of shape [frames, height, width, channels], values in [0, 1].
struct VideoClip {
    std::size_t frames = 0, height = 0, width = 0, channels = 0;
    std::vector<float> pixels;
    std::size_t label = 0;
    std::string source_id;

    std::size_t frame_size() const { return height * width * channels; }
    float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[((t * height + y) * width + x) * channels + c];
    }
    float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) {
        return pixels[((t * height + y) * width + x) * channels + c];
    }
    std::array<std::size_t, 4> shape() const { return {frames, height, width, channels}; }
};

enum class MotionLabel : std::size_t { negative = 0, positive = 1 };

struct SamplePair {
    VideoClip real;  // motion label positive
    VideoClip fake;  // motion label negative
    std::size_t fake_source_frame = 0;
    std::size_t label() const { return real.label; }
};

// Every frame of the result is a copy of frame `source` of the input.
inline VideoClip make_fake(const VideoClip& clip, std::size_t source) {
    if (source >= clip.frames) {
        throw VideoError("make_fake: source frame " + std::to_string(source) + " out of range");
    }
    VideoClip fake = clip;
    const std::size_t fs = clip.frame_size();
    const auto first = clip.pixels.begin() + static_cast<std::ptrdiff_t>(source * fs);
    for (std::size_t t = 0; t < clip.frames; ++t) {
        std::copy_n(first, fs, fake.pixels.begin() + static_cast<std::ptrdiff_t>(t * fs));
    }
    fake.source_id = clip.source_id + "/fake" + std::to_string(source);
    return fake;
}

inline VideoClip make_fake(const VideoClip& clip, SeededRng& rng) {
    return make_fake(clip, static_cast<std::size_t>(rng.below(clip.frames)));
}

inline SamplePair make_pair(const VideoClip& clip, SeededRng& rng) {
    const auto source = static_cast<std::size_t>(rng.below(clip.frames));
    return {clip, make_fake(clip, source), source};
}

// ---------------------------------------------------------------------------
// Synthetic motion dataset: a bright square wrapping around a noisy torus.
// Its start position is uniform per clip, so any single frame is independent
// of the label; only the per-frame displacement direction encodes the class.

struct SynthSpec {
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 1;
    std::size_t classes = 4;
    std::size_t samples_per_class = 8;
    std::size_t square = 8;
    std::size_t min_speed = 2;
    std::size_t max_speed = 4;
    double noise = 0.1;

    void validate() const {
        if (frames < 2) {
            throw VideoError("synth: frames must be >= 2, motion is undefined for a single frame");
        }
        if (classes < 2 || classes > 8) {
            throw VideoError("synth: classes must be in [2, 8]");
        }
        if (height == 0 || width == 0 || channels == 0) {
            throw VideoError("synth: empty frame geometry");
        }
        if (square == 0 || square > std::min(height, width)) {
            throw VideoError("synth: square size must be in [1, min(height, width)]");
        }
        if (min_speed == 0 || min_speed > max_speed) {
            throw VideoError("synth: need 1 <= min_speed <= max_speed");
        }
        if (!(noise >= 0.0 && noise < 1.0)) {
            throw VideoError("synth: noise must be in [0, 1)");
        }
    }
};

// Unit displacement per class: up, down, left, right, then the four diagonals.
inline std::array<int, 2> class_direction(std::size_t label) {
    static constexpr std::array<std::array<int, 2>, 8> dirs = {
        {{0, -1}, {0, 1}, {-1, 0}, {1, 0}, {-1, -1}, {1, 1}, {1, -1}, {-1, 1}}};
    return dirs.at(label);
}

inline VideoClip render_clip(const SynthSpec& spec, std::size_t label, std::size_t x0, std::size_t y0,
                             std::size_t speed, float intensity, SeededRng& rng) {
    VideoClip clip{spec.frames, spec.height, spec.width, spec.channels, {}, label, {}};
    clip.pixels.resize(spec.frames * clip.frame_size());
    const auto [dx, dy] = class_direction(label);
    const auto w = static_cast<long>(spec.width), h = static_cast<long>(spec.height);
    for (std::size_t t = 0; t < spec.frames; ++t) {
        const long step = static_cast<long>(t * speed);
        const long sx = ((static_cast<long>(x0) + dx * step) % w + w) % w;
        const long sy = ((static_cast<long>(y0) + dy * step) % h + h) % h;
        for (std::size_t y = 0; y < spec.height; ++y) {
            const bool in_y = ((static_cast<long>(y) - sy + h) % h) < static_cast<long>(spec.square);
            for (std::size_t x = 0; x < spec.width; ++x) {
                const bool in_x = ((static_cast<long>(x) - sx + w) % w) < static_cast<long>(spec.square);
                for (std::size_t c = 0; c < spec.channels; ++c) {
                    const double bg = spec.noise * rng.uniform();
                    const double v = (in_x && in_y) ? intensity + bg : bg;
                    clip.at(t, y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return clip;
}

inline std::vector<VideoClip> synth_dataset(const SynthSpec& spec, SeededRng& rng) {
    spec.validate();
    std::vector<VideoClip> clips;
    clips.reserve(spec.classes * spec.samples_per_class);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
        for (std::size_t label = 0; label < spec.classes; ++label) {
            const auto x0 = static_cast<std::size_t>(rng.below(spec.width));
            const auto y0 = static_cast<std::size_t>(rng.below(spec.height));
            const auto speed =
                spec.min_speed + static_cast<std::size_t>(rng.below(spec.max_speed - spec.min_speed + 1));
            const auto intensity = static_cast<float>(rng.uniform(0.6, 0.9));
            VideoClip clip = render_clip(spec, label, x0, y0, speed, intensity, rng);
            clip.source_id = "synth-" + std::to_string(rng.seed()) + "-" + std::to_string(clips.size());
            clips.push_back(std::move(clip));
        }
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Clip directory: manifest.json plus one raw little-endian float32 file per clip.

inline void save_clips(const std::filesystem::path& dir, const std::vector<VideoClip>& clips,
                       std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "haltingvt.clips/1";
    manifest["seed"] = seed;
    manifest["clips"] = nlohmann::json::array();
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& clip = clips[i];
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%05zu.f32", i);
        std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
        for (float v : clip.pixels) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                                   static_cast<char>((bits >> 16) & 0xFF),
                                   static_cast<char>((bits >> 24) & 0xFF)};
            os.write(bytes, 4);
        }
        if (!os) {
            throw VideoError("save_clips: cannot write " + (dir / name).string());
        }
        manifest["clips"].push_back({{"file", name},
                                     {"shape", {clip.frames, clip.height, clip.width, clip.channels}},
                                     {"dtype", "float32"},
                                     {"label", clip.label},
                                     {"source_id", clip.source_id}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline std::vector<VideoClip> load_clips(const std::filesystem::path& dir) {
    std::ifstream ms(dir / "manifest.json");
    if (!ms) {
        throw VideoError("load_clips: missing " + (dir / "manifest.json").string());
    }
    const auto manifest = nlohmann::json::parse(ms);
    std::vector<VideoClip> clips;
    for (const auto& entry : manifest.at("clips")) {
        if (entry.at("dtype") != "float32") {
            throw VideoError("load_clips: unsupported dtype " + entry.at("dtype").dump());
        }
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 4) {
            throw VideoError("load_clips: clip shape must have 4 dims");
        }
        VideoClip clip{shape[0], shape[1], shape[2], shape[3], {}, entry.at("label").get<std::size_t>(),
                       entry.at("source_id").get<std::string>()};
        clip.pixels.resize(shape[0] * shape[1] * shape[2] * shape[3]);
        std::ifstream is(dir / entry.at("file").get<std::string>(), std::ios::binary);
        for (float& v : clip.pixels) {
            unsigned char b[4];
            if (!is.read(reinterpret_cast<char*>(b), 4)) {
                throw VideoError("load_clips: truncated clip file " + entry.at("file").get<std::string>());
            }
            v = std::bit_cast<float>(static_cast<std::uint32_t>(b[0] | (b[1] << 8) | (b[2] << 16)) |
                                     (static_cast<std::uint32_t>(b[3]) << 24));
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Tokens

struct GridShape {
    std::size_t frames = 0, rows = 0, cols = 0;
    std::size_t per_frame() const { return rows * cols; }
    std::size_t tokens() const { return frames * rows * cols; }
};

struct TokenPosition {
    std::size_t frame = 0, row = 0, col = 0;
    bool operator==(const TokenPosition&) const = default;
};

inline std::size_t token_count(std::size_t frames, std::size_t height, std::size_t width,
                               std::size_t patch) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw VideoError("patch size " + std::to_string(patch) + " does not divide " +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    return frames * (height / patch) * (width / patch);
}

// Row 0 of `tokens` is the class token; rows 1.. are patch tokens whose
// original grid index (frame-major, then row, then col) is ids[row - 1].
template <typename T>
struct TokenBatch {
    Tensor<T> tokens;
    std::vector<std::size_t> ids;
    std::vector<std::uint8_t> alive;
    GridShape grid;

    std::size_t dim() const { return tokens.cols(); }
    std::size_t patch_rows() const { return ids.size(); }
    std::size_t alive_count() const {
        return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), std::uint8_t{1}));
    }
    bool all_alive() const { return alive_count() == alive.size(); }

    TokenPosition position(std::size_t patch_row) const {
        const std::size_t id = ids[patch_row];
        return {id / grid.per_frame(), (id % grid.per_frame()) / grid.cols, id % grid.cols};
    }

    std::vector<std::size_t> frame_token_counts() const {
        std::vector<std::size_t> counts(grid.frames, 0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (alive[i]) {
                ++counts[position(i).frame];
            }
        }
        return counts;
    }

    Tensor<T> class_token() const { return gather_rows(tokens, {0}); }
    Tensor<T> patch_tokens() const {
        std::vector<std::size_t> rows(ids.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i] = i + 1;
        }
        return gather_rows(tokens, rows);
    }

    // Same batch with its token matrix replaced.
    TokenBatch with_tokens(Tensor<T> next) const {
        TokenBatch out{std::move(next), ids, alive, grid};
        return out;
    }
};

// Physically keeps the listed patch rows (in the given order) plus the class token.
template <typename T>
TokenBatch<T> keep_patch_rows(const TokenBatch<T>& batch, const std::vector<std::size_t>& patch_rows) {
    std::vector<std::size_t> rows{0};
    TokenBatch<T> out;
    out.grid = batch.grid;
    for (std::size_t r : patch_rows) {
        rows.push_back(r + 1);
        out.ids.push_back(batch.ids.at(r));
        out.alive.push_back(batch.alive.at(r));
    }
    out.tokens = gather_rows(batch.tokens, rows);
    return out;
}

// Physically removes every non-alive patch row.
template <typename T>
TokenBatch<T> compact(const TokenBatch<T>& batch) {
    if (batch.all_alive()) {
        return batch;
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < batch.patch_rows(); ++i) {
        if (batch.alive[i]) {
            keep.push_back(i);
        }
    }
    return keep_patch_rows(batch, keep);
}

// Starting point for the learned positions: the embedding width is split into
// frame, row and column bands, each holding sin/cos of its coordinate.
inline std::vector<double> sincos_positions(const GridShape& grid, std::size_t dim, double amplitude = 0.5) {
    const std::size_t band = (dim / 3) & ~std::size_t{1};
    const std::size_t bands[3] = {dim - 2 * band, band, band};
    std::vector<double> out(grid.tokens() * dim, 0.0);
    std::size_t k = 0;
    for (std::size_t t = 0; t < grid.frames; ++t) {
        for (std::size_t r = 0; r < grid.rows; ++r) {
            for (std::size_t c = 0; c < grid.cols; ++c, ++k) {
                const double coord[3] = {double(t), double(r), double(c)};
                double* row = out.data() + k * dim;
                std::size_t offset = 0;
                for (std::size_t b = 0; b < 3; ++b) {
                    for (std::size_t i = 0; i + 1 < bands[b]; i += 2) {
                        const double freq = std::pow(16.0, -static_cast<double>(i) / static_cast<double>(bands[b]));
                        row[offset + i] = amplitude * std::sin(coord[b] * freq);
                        row[offset + i + 1] = amplitude * std::cos(coord[b] * freq);
                    }
                    offset += bands[b];
                }
            }
        }
    }
    return out;
}

template <typename T>
struct PatchEmbedParams {
    Linear<T> proj;        // [P*P*C, D]
    Tensor<T> pos;         // [K, D], one row per (frame, row, col)
    Tensor<T> cls_token;   // [D]
    Tensor<T> cls_pos;     // [D]

    static PatchEmbedParams init(SeededRng& rng, std::size_t patch_dim, const GridShape& grid,
                                 std::size_t dim) {
        PatchEmbedParams p;
        p.proj = Linear<T>::init(rng, patch_dim, dim);
        auto pos = normal_values<T>(rng, grid.tokens() * dim, 0.02);
        const auto table = sincos_positions(grid, dim);
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i] += static_cast<T>(table[i]);
        }
        p.pos = Tensor<T>::parameter({grid.tokens(), dim}, std::move(pos));
        p.cls_token = Tensor<T>::parameter({dim}, normal_values<T>(rng, dim, 0.02));
        p.cls_pos = Tensor<T>::parameter({dim}, normal_values<T>(rng, dim, 0.02));
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        proj.visit(prefix + ".proj", f);
        f(prefix + ".pos", pos);
        f(prefix + ".cls_token", cls_token);
        f(prefix + ".cls_pos", cls_pos);
    }
};

// Raw patch matrix [K, P*P*C]; each row lists a patch's pixels in (dy, dx, channel) order.
inline std::vector<float> extract_patches(const VideoClip& clip, std::size_t patch) {
    const std::size_t rows = clip.height / patch, cols = clip.width / patch;
    const std::size_t pd = patch * patch * clip.channels;
    std::vector<float> out(clip.frames * rows * cols * pd);
    std::size_t k = 0;
    for (std::size_t t = 0; t < clip.frames; ++t) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c, ++k) {
                float* dst = out.data() + k * pd;
                for (std::size_t dy = 0; dy < patch; ++dy) {
                    for (std::size_t dx = 0; dx < patch; ++dx) {
                        for (std::size_t ch = 0; ch < clip.channels; ++ch) {
                            *dst++ = clip.at(t, r * patch + dy, c * patch + dx, ch);
                        }
                    }
                }
            }
        }
    }
    return out;
}

// Linear projection of every P x P x C patch plus learned space-time positions;
// the class token (with its own position vector) becomes row 0.
template <typename T>
TokenBatch<T> patch_embed(const VideoClip& clip, std::size_t patch, const PatchEmbedParams<T>& params) {
    const std::size_t k = token_count(clip.frames, clip.height, clip.width, patch);
    const std::size_t pd = patch * patch * clip.channels;
    if (params.proj.in_features() != pd) {
        throw ShapeError("patch_embed", Shape{k, pd}, params.proj.weight.shape());
    }
    if (params.pos.rows() != k) {
        throw ShapeError("patch_embed", Shape{k, params.proj.out_features()}, params.pos.shape());
    }
    const std::vector<float> raw = extract_patches(clip, patch);
    auto patches = Tensor<T>::from({k, pd}, std::vector<T>(raw.begin(), raw.end()));
    auto embedded = add(params.proj(patches), params.pos);
    auto cls = reshape(add(params.cls_token, params.cls_pos), {1, params.cls_token.size()});

    TokenBatch<T> batch;
    batch.tokens = concat_rows<T>({cls, embedded});
    batch.grid = {clip.frames, clip.height / patch, clip.width / patch};
    batch.ids.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        batch.ids[i] = i;
    }
    batch.alive.assign(k, 1);
    return batch;
}

}  // namespace haltingvt
