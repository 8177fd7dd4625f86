#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uman/loss.hpp"
#include "uman/man.hpp"
#include "uman/pagf.hpp"
#include "uman/params.hpp"

namespace uman {

// Full architectural hyperparameters. paper() is the reference configuration;
// desk() scales the channel ladder down for CPU-sized experiments.
struct NetworkConfig {
    std::array<std::size_t, 5> embed_dims = {32, 64, 256, 320, 512};
    std::array<std::size_t, 3> man_depths = {3, 3, 3};  // encoder MAN, bottleneck, decoder MAN
    std::vector<std::size_t> msab_kernels = {1, 3, 5};
    std::size_t kan_grid_size = 5;
    std::size_t kan_spline_order = 3;
    double kan_range_lo = -1.0;
    double kan_range_hi = 1.0;
    PagfMode pagf_mode = PagfMode::Full;
    double drop_path = 0.0;
    std::size_t num_classes = 1;
    std::size_t input_channels = 3;
    bool use_msab = true;
    LossConfig loss;

    static NetworkConfig paper() { return NetworkConfig{}; }

    static NetworkConfig desk() {
        NetworkConfig c;
        c.embed_dims = {8, 16, 32, 40, 64};
        return c;
    }

    void validate() const {
        for (std::size_t d : embed_dims)
            if (d == 0) throw UsageError("config: embed dims must be positive");
        for (std::size_t d : man_depths)
            if (d == 0) throw UsageError("config: man depths must be positive");
        if (msab_kernels.empty() && use_msab) throw UsageError("config: empty msab kernel set");
        if (num_classes == 0 || input_channels == 0)
            throw UsageError("config: classes/channels must be positive");
        if (drop_path < 0.0 || drop_path >= 1.0) throw UsageError("config: drop_path in [0,1)");
        loss.validate();
    }

    SplineGrid spline_grid() const {
        return SplineGrid(kan_grid_size, kan_spline_order, kan_range_lo, kan_range_hi);
    }
};

namespace detail {

// Two conv-BN-ReLU repetitions, the classic encoder/decoder block.
struct ConvBlock {
    ConvBn c1, c2;

    ConvBlock() = default;
    ConvBlock(ParameterStore& store, const std::string& prefix, Rng& rng, std::size_t cin,
              std::size_t cout)
        : c1(store, prefix + ".c1", "conv", rng, cin, cout, 3),
          c2(store, prefix + ".c2", "conv", rng, cout, cout, 3) {}

    Tensor forward(const Tensor& x, bool training) {
        Tensor h = relu(c1.forward(x, 1, 1, training));
        return relu(c2.forward(h, 1, 1, training));
    }
};

struct Conv1x1 {
    Tensor w, b;

    Conv1x1() = default;
    Conv1x1(ParameterStore& store, const std::string& prefix, const std::string& group, Rng& rng,
            std::size_t cin, std::size_t cout) {
        double std = std::sqrt(2.0 / static_cast<double>(cin));
        w = store.add_param(prefix + ".w", group, Tensor::randn(rng, {cout, cin, 1, 1}, std));
        b = store.add_param(prefix + ".b", group, Tensor::zeros({cout}));
    }

    Tensor forward(const Tensor& x) { return conv2d(x, w, b, 1, 0); }
};

}  // namespace detail

// Encoder (three conv stages + MAN stage + MAN bottleneck), decoder (MAN
// stage + three conv stages) with attention-gated skip fusion at every level,
// and a 1x1 segmentation head emitting logits at input resolution.
class UmanNetwork {
public:
    UmanNetwork(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const auto& d = cfg_.embed_dims;
        SplineGrid grid = cfg_.spline_grid();

        enc1_ = detail::ConvBlock(store_, "enc1", rng, cfg_.input_channels, d[0]);
        enc2_ = detail::ConvBlock(store_, "enc2", rng, d[0], d[1]);
        enc3_ = detail::ConvBlock(store_, "enc3", rng, d[1], d[2]);
        man_enc_ = std::make_unique<ManStage>(store_, "man_enc", rng, d[2], d[3],
                                              cfg_.man_depths[0], 2, cfg_.msab_kernels, grid,
                                              cfg_.drop_path, cfg_.use_msab);
        man_bot_ = std::make_unique<ManStage>(store_, "man_bot", rng, d[3], d[4],
                                              cfg_.man_depths[1], 1, cfg_.msab_kernels, grid,
                                              cfg_.drop_path, cfg_.use_msab);

        proj4_ = detail::Conv1x1(store_, "dec.proj4", "conv", rng, d[4], d[3]);
        pagf4_ = std::make_unique<Pagf>(store_, "pagf4", rng, d[3], cfg_.pagf_mode);
        man_dec_ = std::make_unique<ManStage>(store_, "man_dec", rng, d[3], d[3],
                                              cfg_.man_depths[2], 1, cfg_.msab_kernels, grid,
                                              cfg_.drop_path, cfg_.use_msab);
        proj3_ = detail::Conv1x1(store_, "dec.proj3", "conv", rng, d[3], d[2]);
        pagf3_ = std::make_unique<Pagf>(store_, "pagf3", rng, d[2], cfg_.pagf_mode);
        dec3_ = detail::ConvBlock(store_, "dec3", rng, d[2], d[2]);
        proj2_ = detail::Conv1x1(store_, "dec.proj2", "conv", rng, d[2], d[1]);
        pagf2_ = std::make_unique<Pagf>(store_, "pagf2", rng, d[1], cfg_.pagf_mode);
        dec2_ = detail::ConvBlock(store_, "dec2", rng, d[1], d[1]);
        proj1_ = detail::Conv1x1(store_, "dec.proj1", "conv", rng, d[1], d[0]);
        pagf1_ = std::make_unique<Pagf>(store_, "pagf1", rng, d[0], cfg_.pagf_mode);
        dec1_ = detail::ConvBlock(store_, "dec1", rng, d[0], d[0]);

        head_ = detail::Conv1x1(store_, "head", "head", rng, d[0], cfg_.num_classes);
    }

    // I [N,C,H,W] -> logits [N,K,H,W]. Sigmoid lives in the loss, not here.
    Tensor forward(const Tensor& x, bool training, Rng* droppath_rng = nullptr) {
        if (x.rank() != 4) throw ShapeError("uman_forward: expected [N,C,H,W]");
        if (x.dim(1) != cfg_.input_channels)
            throw ShapeError("uman_forward: expected " + std::to_string(cfg_.input_channels) +
                             " input channels, got " + std::to_string(x.dim(1)));
        if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0)
            throw ShapeError("uman_forward: H and W must be divisible by 16");

        Tensor e1 = max_pool2x(enc1_.forward(x, training));    // d1 @ /2
        Tensor e2 = max_pool2x(enc2_.forward(e1, training));   // d2 @ /4
        Tensor e3 = max_pool2x(enc3_.forward(e2, training));   // d3 @ /8
        Tensor e4 = man_enc_->forward(e3, training, droppath_rng);   // d4 @ /16
        Tensor bot = man_bot_->forward(e4, training, droppath_rng);  // d5 @ /16

        Tensor h = proj4_.forward(bot);                        // d4 @ /16
        h = pagf4_->forward(h, e4, training);
        h = man_dec_->forward(h, training, droppath_rng);      // d4 @ /16
        h = proj3_.forward(bilinear_upsample2x(h));            // d3 @ /8
        h = pagf3_->forward(h, e3, training);
        h = dec3_.forward(h, training);
        h = proj2_.forward(bilinear_upsample2x(h));            // d2 @ /4
        h = pagf2_->forward(h, e2, training);
        h = dec2_.forward(h, training);
        h = proj1_.forward(bilinear_upsample2x(h));            // d1 @ /2
        h = pagf1_->forward(h, e1, training);
        h = dec1_.forward(h, training);
        h = bilinear_upsample2x(h);                            // d1 @ full res
        return head_.forward(h);
    }

    // Encoder feature maps, shallow to bottleneck (channel-ladder checks).
    std::vector<Tensor> encoder_features(const Tensor& x) {
        std::vector<Tensor> feats;
        Tensor e1 = max_pool2x(enc1_.forward(x, false));
        Tensor e2 = max_pool2x(enc2_.forward(e1, false));
        Tensor e3 = max_pool2x(enc3_.forward(e2, false));
        Tensor e4 = man_enc_->forward(e3, false);
        Tensor bot = man_bot_->forward(e4, false);
        feats.assign({e1, e2, e3, e4, bot});
        return feats;
    }

    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }
    const NetworkConfig& config() const { return cfg_; }
    ManStage& man_encoder_stage() { return *man_enc_; }

private:
    NetworkConfig cfg_;
    ParameterStore store_;
    detail::ConvBlock enc1_, enc2_, enc3_, dec3_, dec2_, dec1_;
    std::unique_ptr<ManStage> man_enc_, man_bot_, man_dec_;
    std::unique_ptr<Pagf> pagf4_, pagf3_, pagf2_, pagf1_;
    detail::Conv1x1 proj4_, proj3_, proj2_, proj1_, head_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "UMAN1", then little-endian u32 tensor count and
// per tensor { u16 name length, name bytes, u8 rank, u32 dims[rank],
// f32 data row-major }. Parameters first, then buffers, in registration
// order. Values are rounded to f32 exactly once at save time.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    explicit ByteReader(const std::string& b) : buf(b) {}

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint: truncated file");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline void append_tensor(std::string& out, const std::string& name, const Tensor& t) {
    if (name.size() > 0xffff) throw IoError("checkpoint: name too long");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f32(out, static_cast<float>(v));
}

}  // namespace detail

inline std::string checkpoint_magic() { return "UMAN1"; }

inline std::string save_checkpoint_bytes(const ParameterStore& store) {
    std::string out = checkpoint_magic();
    std::size_t count = store.params().size() + store.buffers().size();
    detail::put_u32(out, static_cast<std::uint32_t>(count));
    for (const auto& e : store.params()) detail::append_tensor(out, e.name, e.tensor);
    for (const auto& e : store.buffers()) detail::append_tensor(out, e.name, e.tensor);
    return out;
}

inline void save_checkpoint(const ParameterStore& store, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    std::string bytes = save_checkpoint_bytes(store);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint: write failed for '" + path + "'");
}

// Loads a checkpoint into an existing store; every stored tensor must match a
// registered tensor by name and shape, and vice versa.
inline void load_checkpoint_bytes(ParameterStore& store, const std::string& bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(5) != checkpoint_magic()) throw IoError("checkpoint: bad magic");
    std::uint32_t count = r.u32();
    std::map<std::string, std::pair<Shape, std::vector<double>>> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.u16());
        std::uint8_t rank = r.u8();
        Shape shape(rank);
        for (std::uint8_t k = 0; k < rank; ++k) shape[k] = r.u32();
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = static_cast<double>(r.f32());
        if (loaded.count(name)) throw IoError("checkpoint: duplicate tensor '" + name + "'");
        loaded[name] = {std::move(shape), std::move(data)};
    }
    if (r.pos != bytes.size()) throw IoError("checkpoint: trailing bytes");

    std::vector<std::string> offending;
    auto apply = [&](std::vector<ParameterStore::Entry>& entries) {
        for (auto& e : entries) {
            auto it = loaded.find(e.name);
            if (it == loaded.end()) {
                offending.push_back(e.name + " (missing from checkpoint)");
                continue;
            }
            if (it->second.first != e.tensor.shape()) {
                offending.push_back(e.name + " (shape " + shape_str(it->second.first) +
                                    " vs expected " + shape_str(e.tensor.shape()) + ")");
            }
        }
    };
    apply(store.params());
    apply(store.buffers());
    for (const auto& [name, _] : loaded)
        if (!store.has(name)) offending.push_back(name + " (not in model)");
    if (!offending.empty()) {
        std::string msg = "checkpoint incompatible with model config; offending tensors:";
        for (const auto& n : offending) msg += "\n  " + n;
        throw UsageError(msg);
    }
    for (auto& e : store.params()) e.tensor.data() = loaded[e.name].second;
    for (auto& e : store.buffers()) e.tensor.data() = loaded[e.name].second;
}

inline void load_checkpoint(ParameterStore& store, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    load_checkpoint_bytes(store, ss.str());
}

// Rounds every value through f32 storage precision, the same quantization a
// save/load round trip applies.
inline void round_store_to_f32(ParameterStore& store) {
    for (auto& e : store.params())
        for (double& v : e.tensor.data()) v = static_cast<double>(static_cast<float>(v));
    for (auto& e : store.buffers())
        for (double& v : e.tensor.data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace uman
