#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uman/tensor.hpp"

namespace uman {

// Image [3,H,W] with values in [0,1] before normalization, paired with a
// strictly binary mask [1,H,W].
struct SegmentationSample {
    Tensor image;
    Tensor mask;
    std::string id;
};

enum class ShapeFamily { Ellipse, Blob };

struct DatasetSpec {
    std::size_t n_samples = 64;
    std::size_t size = 64;  // H == W
    ShapeFamily family = ShapeFamily::Ellipse;
    double noise_sigma = 0.05;
    double contrast_lo = 0.25;
    double contrast_hi = 0.5;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_samples < 5) throw UsageError("dataset: n_samples must be >= 5");
        if (size < 32) throw UsageError("dataset: size must be >= 32");
        if (contrast_hi < contrast_lo) throw UsageError("dataset: bad contrast range");
        if (noise_sigma < 0.0) throw UsageError("dataset: negative noise");
    }
};

// All geometry is in pixel units with pixel centers at half-integers.
// Centers are quantized to multiples of 1/64 so that 90-degree parameter
// rotations are exact in floating point.
struct EllipseShape {
    double cx, cy;   // center, dyadic
    double cos_t, sin_t;  // orientation
    double a, b;     // semi-axes
};

struct BlobShape {
    double cx, cy;
    double r0;
    std::array<double, 3> amp;
    std::array<double, 3> phase;
};

struct ShapeSet {
    ShapeFamily family = ShapeFamily::Ellipse;
    std::vector<EllipseShape> ellipses;
    std::vector<BlobShape> blobs;
};

namespace detail {

inline double quantize64(double v) { return std::round(v * 64.0) / 64.0; }

inline bool inside_ellipse(const EllipseShape& e, double px, double py) {
    double dx = px - e.cx;
    double dy = py - e.cy;
    double u = e.cos_t * dx + e.sin_t * dy;
    double v = e.cos_t * dy - e.sin_t * dx;
    double ru = u / e.a;
    double rv = v / e.b;
    return ru * ru + rv * rv <= 1.0;
}

inline bool inside_blob(const BlobShape& s, double px, double py) {
    double dx = px - s.cx;
    double dy = py - s.cy;
    double rho = std::sqrt(dx * dx + dy * dy);
    double phi = std::atan2(dy, dx);
    double r = 1.0;
    for (std::size_t k = 0; k < s.amp.size(); ++k)
        r += s.amp[k] * std::cos(static_cast<double>(k + 2) * phi + s.phase[k]);
    return rho <= s.r0 * r;
}

inline bool inside(const ShapeSet& shapes, double px, double py) {
    if (shapes.family == ShapeFamily::Ellipse) {
        for (const auto& e : shapes.ellipses)
            if (inside_ellipse(e, px, py)) return true;
    } else {
        for (const auto& b : shapes.blobs)
            if (inside_blob(b, px, py)) return true;
    }
    return false;
}

}  // namespace detail

inline ShapeSet sample_shapes(Rng& rng, const DatasetSpec& spec) {
    ShapeSet out;
    out.family = spec.family;
    double s = static_cast<double>(spec.size);
    std::size_t count = 1 + rng.uniform_int(3);
    for (std::size_t i = 0; i < count; ++i) {
        if (spec.family == ShapeFamily::Ellipse) {
            EllipseShape e;
            e.cx = detail::quantize64(rng.uniform(0.3, 0.7) * s);
            e.cy = detail::quantize64(rng.uniform(0.3, 0.7) * s);
            double theta = rng.uniform(0.0, 3.14159265358979323846);
            e.cos_t = std::cos(theta);
            e.sin_t = std::sin(theta);
            e.a = rng.uniform(0.10, 0.22) * s;
            e.b = rng.uniform(0.10, 0.22) * s;
            out.ellipses.push_back(e);
        } else {
            BlobShape b;
            b.cx = detail::quantize64(rng.uniform(0.3, 0.7) * s);
            b.cy = detail::quantize64(rng.uniform(0.3, 0.7) * s);
            b.r0 = rng.uniform(0.13, 0.20) * s;
            for (std::size_t k = 0; k < 3; ++k) {
                b.amp[k] = rng.uniform(0.0, 0.05);
                b.phase[k] = rng.uniform(0.0, 6.283185307179586);
            }
            out.blobs.push_back(b);
        }
    }
    return out;
}

// Exact analytic membership mask at pixel centers.
inline Tensor render_mask(const ShapeSet& shapes, std::size_t size) {
    Tensor mask({1, size, size});
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
            double px = static_cast<double>(c) + 0.5;
            double py = static_cast<double>(r) + 0.5;
            mask.data()[r * size + c] = detail::inside(shapes, px, py) ? 1.0 : 0.0;
        }
    return mask;
}

// 90-degree parameter rotation matching rot90 of the rendered mask bit for
// bit. Defined for the ellipse family, whose membership arithmetic is exact
// under the quarter-turn coordinate map.
inline ShapeSet rot90_shapes(const ShapeSet& shapes, std::size_t size) {
    if (shapes.family != ShapeFamily::Ellipse)
        throw UsageError("rot90_shapes: exact rotation defined for the ellipse family only");
    ShapeSet out = shapes;
    double s = static_cast<double>(size);
    for (auto& e : out.ellipses) {
        double cx = e.cx, cy = e.cy;
        e.cx = s - cy;
        e.cy = cx;
        double c = e.cos_t, sn = e.sin_t;
        e.cos_t = -sn;
        e.sin_t = c;
    }
    return out;
}

// Fully determined by (spec.seed, index): the per-sample stream is derived,
// so generation order and sharding cannot change the result.
inline SegmentationSample generate_sample(const DatasetSpec& spec, std::size_t index) {
    Rng rng = Rng::derive(spec.seed, index);
    ShapeSet shapes = sample_shapes(rng, spec);
    std::size_t size = spec.size;

    double background = rng.uniform(0.2, 0.45);
    double contrast = rng.uniform(spec.contrast_lo, spec.contrast_hi);
    std::array<double, 3> tint;
    for (double& t : tint) t = rng.uniform(-0.03, 0.03);

    SegmentationSample out;
    out.mask = render_mask(shapes, size);
    out.image = Tensor({3, size, size});
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) {
            double base = out.mask.data()[r * size + c] != 0.0 ? background + contrast : background;
            for (std::size_t ch = 0; ch < 3; ++ch) {
                double v = base + tint[ch];
                if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
                out.image.data()[(ch * size + r) * size + c] = std::min(std::max(v, 0.0), 1.0);
            }
        }

    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%05zu", index);
    out.id = buf;
    return out;
}

inline std::vector<SegmentationSample> generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    std::vector<SegmentationSample> out;
    out.reserve(spec.n_samples);
    for (std::size_t i = 0; i < spec.n_samples; ++i) out.push_back(generate_sample(spec, i));
    return out;
}

// ---------------------------------------------------------------------------
// Split and augmentation
// ---------------------------------------------------------------------------

inline std::pair<std::vector<SegmentationSample>, std::vector<SegmentationSample>> split(
    const std::vector<SegmentationSample>& samples, double fraction, std::uint64_t seed) {
    if (samples.size() < 2) throw UsageError("split: need at least 2 samples");
    if (fraction <= 0.0 || fraction >= 1.0) throw UsageError("split: fraction in (0,1)");
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size(); i-- > 1;)
        std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    std::size_t n_train =
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(samples.size())));
    if (n_train >= samples.size()) n_train = samples.size() - 1;
    std::pair<std::vector<SegmentationSample>, std::vector<SegmentationSample>> out;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(samples[idx[i]]);
    return out;
}

struct AugmentOps {
    int quarter_turns = 0;  // 90-degree steps
    bool hflip = false;
    bool vflip = false;
};

inline AugmentOps sample_augment_ops(Rng& rng) {
    AugmentOps ops;
    ops.quarter_turns = static_cast<int>(rng.uniform_int(4));
    ops.hflip = rng.coin();
    ops.vflip = rng.coin();
    return ops;
}

namespace detail {

// out[r][c] = in[S-1-c][r], one quarter turn.
inline void rot90_plane(const double* in, double* out, std::size_t s) {
    for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) out[r * s + c] = in[(s - 1 - c) * s + r];
}

inline void hflip_plane(const double* in, double* out, std::size_t s) {
    for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) out[r * s + c] = in[r * s + (s - 1 - c)];
}

inline void vflip_plane(const double* in, double* out, std::size_t s) {
    for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c) out[r * s + c] = in[(s - 1 - r) * s + c];
}

inline Tensor transform_planes(const Tensor& t, const AugmentOps& ops) {
    std::size_t ch = t.dim(0), s = t.dim(1);
    if (t.dim(2) != s) throw ShapeError("augment: square images only");
    Tensor cur = t.clone();
    Tensor tmp(t.shape());
    auto apply = [&](auto&& fn) {
        for (std::size_t c = 0; c < ch; ++c)
            fn(cur.data().data() + c * s * s, tmp.data().data() + c * s * s, s);
        std::swap(cur, tmp);
    };
    for (int q = 0; q < ops.quarter_turns; ++q) apply(rot90_plane);
    if (ops.hflip) apply(hflip_plane);
    if (ops.vflip) apply(vflip_plane);
    return cur;
}

}  // namespace detail

// Rotation/flip applied identically to image and mask (mask stays binary:
// these are pure index permutations).
inline SegmentationSample apply_geometric(const SegmentationSample& s, const AugmentOps& ops) {
    SegmentationSample out;
    out.image = detail::transform_planes(s.image, ops);
    out.mask = detail::transform_planes(s.mask, ops);
    out.id = s.id;
    return out;
}

// Channel normalization (x - 0.5) / 0.5, mapping [0,1] onto [-1,1]. Applied
// to the image only; the mask is left binary.
inline SegmentationSample normalize(const SegmentationSample& s) {
    SegmentationSample out;
    out.image = s.image.clone();
    for (double& v : out.image.data()) v = (v - 0.5) / 0.5;
    out.mask = s.mask;
    out.id = s.id;
    return out;
}

inline SegmentationSample augment(const SegmentationSample& s, std::uint64_t seed) {
    Rng rng(seed);
    return normalize(apply_geometric(s, sample_augment_ops(rng)));
}

// ---------------------------------------------------------------------------
// PGM/PPM (binary P5/P6, maxval 255) and the dataset directory layout
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_next_int(std::istream& in) {
    // Skip whitespace and '#' comments between header tokens.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c)) throw IoError("pnm: malformed header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = in.get();
    }
    if (c == EOF) throw IoError("pnm: truncated header");
    return v;
}

inline void pnm_write(const std::string& path, const Tensor& t, bool color) {
    std::size_t ch = color ? 3 : 1;
    if (t.rank() != 3 || t.dim(0) != ch) throw ShapeError("pnm: bad tensor shape");
    std::size_t h = t.dim(1), w = t.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("pnm: cannot open '" + path + "' for writing");
    f << (color ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::string payload(ch * h * w, '\0');
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t k = 0; k < ch; ++k) {
                double v = t.data()[(k * h + r) * w + c];
                v = std::min(std::max(v, 0.0), 1.0);
                payload[(r * w + c) * ch + k] = static_cast<char>(
                    static_cast<unsigned char>(std::lround(v * 255.0)));
            }
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("pnm: write failed for '" + path + "'");
}

inline Tensor pnm_read(const std::string& path, bool color) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("pnm: cannot open '" + path + "'");
    char m0 = static_cast<char>(f.get());
    char m1 = static_cast<char>(f.get());
    const char expect = color ? '6' : '5';
    if (m0 != 'P' || m1 != expect) throw IoError("pnm: bad magic in '" + path + "'");
    std::size_t w = static_cast<std::size_t>(pnm_next_int(f));
    std::size_t h = static_cast<std::size_t>(pnm_next_int(f));
    int maxval = pnm_next_int(f);
    if (w == 0 || h == 0) throw IoError("pnm: zero dimensions");
    if (maxval != 255) throw IoError("pnm: unsupported maxval");
    std::size_t ch = color ? 3 : 1;
    std::string payload(ch * h * w, '\0');
    f.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::size_t>(f.gcount()) != payload.size())
        throw IoError("pnm: truncated payload in '" + path + "'");
    Tensor t({ch, h, w});
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t k = 0; k < ch; ++k)
                t.data()[(k * h + r) * w + c] =
                    static_cast<double>(static_cast<unsigned char>(payload[(r * w + c) * ch + k])) /
                    255.0;
    return t;
}

}  // namespace detail

inline void write_pgm(const std::string& path, const Tensor& gray) {
    detail::pnm_write(path, gray, false);
}
inline Tensor read_pgm(const std::string& path) { return detail::pnm_read(path, false); }
inline void write_ppm(const std::string& path, const Tensor& rgb) {
    detail::pnm_write(path, rgb, true);
}
inline Tensor read_ppm(const std::string& path) { return detail::pnm_read(path, true); }

// Layout: <root>/images/<id>.ppm, <root>/masks/<id>.pgm, manifest.txt with
// one id per line.
inline void save_dataset(const std::string& root, const std::vector<SegmentationSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    std::ofstream manifest(fs::path(root) / "manifest.txt", std::ios::binary);
    if (!manifest) throw IoError("dataset: cannot write manifest in '" + root + "'");
    for (const auto& s : samples) {
        write_ppm((fs::path(root) / "images" / (s.id + ".ppm")).string(), s.image);
        write_pgm((fs::path(root) / "masks" / (s.id + ".pgm")).string(), s.mask);
        manifest << s.id << "\n";
    }
}

inline std::vector<SegmentationSample> load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(root) / "manifest.txt", std::ios::binary);
    if (!manifest) throw IoError("dataset: missing manifest.txt in '" + root + "'");
    std::vector<SegmentationSample> out;
    std::string id;
    while (std::getline(manifest, id)) {
        if (!id.empty() && id.back() == '\r') id.pop_back();
        if (id.empty()) continue;
        SegmentationSample s;
        s.id = id;
        s.image = read_ppm((fs::path(root) / "images" / (id + ".ppm")).string());
        s.mask = read_pgm((fs::path(root) / "masks" / (id + ".pgm")).string());
        // Quantized grays snap back to a strictly binary mask.
        for (double& v : s.mask.data()) v = v >= 0.5 ? 1.0 : 0.0;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw IoError("dataset: empty manifest in '" + root + "'");
    return out;
}

}  // namespace uman
