#pragma once

// Compact encoder-decoder regressor emitting a per-pixel Laplace (mu, b):
// 1x1 stem convolution, pre-activation residual blocks, stride-2 1x1
// downsampling that doubles the feature maps, nearest-neighbor upsampling
// with normed 1x1 convolutions, concat-combine skip layers, and a 2-channel
// linear head whose second channel passes through softplus(.) + b_min.
//
// Reverse-mode differentiation is hand-wired: forward pushes per-primitive
// caches onto type-segregated stacks in a Tape, backward pops them in the
// exact reverse order.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/tensor.hpp"

namespace canopyuq {

struct ModelConfig {
    int in_channels = 9;
    int base_filters = 32;
    int depth = 4;            // number of downsamplings
    int blocks_per_level = 2; // residual blocks per level
    float b_min = 0.01f;      // minimum Laplace scale, meters

    void validate() const {
        if (in_channels < 1 || base_filters < 1 || depth < 1 || blocks_per_level < 1)
            throw ArgError("ModelConfig: all dimensions must be >= 1");
        if (!(b_min > 0.0f)) throw ArgError("ModelConfig: b_min must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedTensor {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<T> v;
    bool trainable = true;

    size_t size() const { return v.size(); }
};

template <typename T>
struct ParamStore {
    std::vector<NamedTensor<T>> items;

    size_t add(std::string name, std::vector<uint32_t> dims, bool trainable = true) {
        size_t total = 1;
        for (uint32_t d : dims) total *= d;
        NamedTensor<T> t;
        t.name = std::move(name);
        t.dims = std::move(dims);
        t.v.assign(total, T(0));
        t.trainable = trainable;
        items.push_back(std::move(t));
        return items.size() - 1;
    }

    NamedTensor<T>& operator[](size_t i) { return items[i]; }
    const NamedTensor<T>& operator[](size_t i) const { return items[i]; }

    size_t trainable_count() const {
        size_t total = 0;
        for (const auto& t : items)
            if (t.trainable) total += t.size();
        return total;
    }

    // Same layout, zero values; used for gradients and optimizer state.
    ParamStore<T> zeros_like() const {
        ParamStore<T> z;
        z.items.reserve(items.size());
        for (const auto& t : items) {
            NamedTensor<T> n;
            n.name = t.name;
            n.dims = t.dims;
            n.trainable = t.trainable;
            n.v.assign(t.v.size(), T(0));
            z.items.push_back(std::move(n));
        }
        return z;
    }
};

// Per-pixel Laplace parameters for a batch of patches; both [n, h, w, 1].
template <typename T>
struct LaplaceFieldBatch {
    Tensor4<T> mu;
    Tensor4<T> b;
};

template <typename T>
class ResUNet {
public:
    ModelConfig cfg;
    ParamStore<T> params;

    explicit ResUNet(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        build_layout();
    }

    // HeNormal init truncated at two standard deviations, pre-scaled so the
    // post-truncation std is sqrt(2 / fan_in). Batch norms start as identity.
    void init_params(uint64_t seed) {
        Rng rng(seed);
        constexpr double kTruncCorrection = 0.87962566103423978;
        for (auto& t : params.items) {
            if (ends_with(t.name, ".w")) {
                size_t fan_in = 1;
                for (size_t i = 0; i + 1 < t.dims.size(); ++i) fan_in *= t.dims[i];
                const double target_std = std::sqrt(2.0 / static_cast<double>(fan_in));
                const double raw_std = target_std / kTruncCorrection;
                for (auto& v : t.v) {
                    double z;
                    do {
                        z = rng.normal();
                    } while (std::abs(z) > 2.0);
                    v = static_cast<T>(z * raw_std);
                }
            } else if (ends_with(t.name, ".gamma") || ends_with(t.name, ".running_var")) {
                std::fill(t.v.begin(), t.v.end(), T(1));
            } else {
                std::fill(t.v.begin(), t.v.end(), T(0));
            }
        }
    }

    size_t parameter_count() const { return params.trainable_count(); }

    struct Tape {
        std::vector<Tensor4<T>> conv_x;
        std::vector<nn::BnCache<T>> bn;
        std::vector<Tensor4<T>> relu_x;
        Tensor4<T> head_b_raw;  // pre-softplus scale channel
    };

    // Training mode uses batch statistics and updates the running stats.
    LaplaceFieldBatch<T> forward(const Tensor4<T>& x, bool training, Tape* tape = nullptr) {
        if (x.c != cfg.in_channels)
            throw ArgError("forward: input has " + std::to_string(x.c) +
                           " channels, model expects " + std::to_string(cfg.in_channels));
        const int div = 1 << cfg.depth;
        if (x.h % div || x.w % div)
            throw ArgError("forward: spatial size must be divisible by 2^depth");

        Tensor4<T> t = conv_fwd(stem_conv_, x, tape);
        t = bn_fwd(stem_bn_, t, training, tape);

        std::vector<Tensor4<T>> skips(cfg.depth);
        for (int l = 0; l < cfg.depth; ++l) {
            for (const ResBlockRef& blk : enc_[l]) t = block_fwd(blk, t, training, tape);
            skips[l] = t;
            t = conv_fwd(down_[l], t, tape);
        }
        for (const ResBlockRef& blk : bottleneck_) t = block_fwd(blk, t, training, tape);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            t = nn::upsample2_forward(t);
            t = conv_fwd(up_conv_[l], t, tape);
            t = bn_fwd(up_bn_[l], t, training, tape);
            t = nn::concat_channels(t, skips[l]);
            t = conv_fwd(comb_conv_[l], t, tape);
            t = bn_fwd(comb_bn_[l], t, training, tape);
            for (const ResBlockRef& blk : dec_[l]) t = block_fwd(blk, t, training, tape);
        }
        t = conv_fwd(head_, t, tape);

        LaplaceFieldBatch<T> out;
        out.mu = Tensor4<T>(t.n, t.h, t.w, 1);
        out.b = Tensor4<T>(t.n, t.h, t.w, 1);
        Tensor4<T> b_raw(t.n, t.h, t.w, 1);
        for (size_t p = 0; p < t.pixels(); ++p) {
            out.mu.v[p] = t.v[p * 2];
            b_raw.v[p] = t.v[p * 2 + 1];
            out.b.v[p] = nn::softplus(t.v[p * 2 + 1]) + static_cast<T>(cfg.b_min);
        }
        if (tape) tape->head_b_raw = std::move(b_raw);
        return out;
    }

    // Consumes the tape; returns gradients congruent with `params`.
    ParamStore<T> backward(Tape& tape, const Tensor4<T>& dmu, const Tensor4<T>& db) {
        if (!dmu.all_finite() || !db.all_finite())
            throw NumericError("backward: non-finite upstream gradients");
        ParamStore<T> grads = params.zeros_like();

        // Chain the scale gradient through the softplus head.
        Tensor4<T> dy(dmu.n, dmu.h, dmu.w, 2);
        for (size_t p = 0; p < dmu.pixels(); ++p) {
            dy.v[p * 2] = dmu.v[p];
            dy.v[p * 2 + 1] = db.v[p] * nn::sigmoid(tape.head_b_raw.v[p]);
        }

        Tensor4<T> d = conv_bwd(head_, dy, tape, grads);
        std::vector<Tensor4<T>> dskips(cfg.depth);
        for (int l = 0; l < cfg.depth; ++l) {  // reverse of the l = depth-1..0 loop
            for (int b = static_cast<int>(dec_[l].size()) - 1; b >= 0; --b)
                d = block_bwd(dec_[l][b], d, tape, grads);
            d = bn_bwd(comb_bn_[l], d, tape, grads);
            d = conv_bwd(comb_conv_[l], d, tape, grads);
            const int ch = level_channels(l);
            auto [d_up, d_skip] = nn::split_channels(d, ch);
            dskips[l] = std::move(d_skip);
            d = bn_bwd(up_bn_[l], d_up, tape, grads);
            d = conv_bwd(up_conv_[l], d, tape, grads);
            d = nn::upsample2_backward(d);
        }
        for (int b = static_cast<int>(bottleneck_.size()) - 1; b >= 0; --b)
            d = block_bwd(bottleneck_[b], d, tape, grads);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            d = conv_bwd(down_[l], d, tape, grads);
            for (size_t i = 0; i < d.v.size(); ++i) d.v[i] += dskips[l].v[i];
            for (int b = static_cast<int>(enc_[l].size()) - 1; b >= 0; --b)
                d = block_bwd(enc_[l][b], d, tape, grads);
        }
        d = bn_bwd(stem_bn_, d, tape, grads);
        conv_bwd(stem_conv_, d, tape, grads);  // input gradient discarded
        return grads;
    }

    // Checkpoint: magic "CUQM", version, config block, named float32 tensors.
    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError(path + ": cannot open for writing");
        ByteWriter w(os);
        w.magic("CUQM");
        w.u32(1);
        w.u32(static_cast<uint32_t>(cfg.in_channels));
        w.u32(static_cast<uint32_t>(cfg.base_filters));
        w.u32(static_cast<uint32_t>(cfg.depth));
        w.u32(static_cast<uint32_t>(cfg.blocks_per_level));
        w.f32(cfg.b_min);
        w.u32(static_cast<uint32_t>(params.items.size()));
        for (const auto& t : params.items) {
            w.u16(static_cast<uint16_t>(t.name.size()));
            w.bytes(t.name.data(), t.name.size());
            w.u8(static_cast<uint8_t>(t.dims.size()));
            for (uint32_t d : t.dims) w.u32(d);
            for (const T v : t.v) w.f32(static_cast<float>(v));
        }
    }

    static ResUNet<T> load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError(path + ": cannot open");
        ByteReader r(is, path);
        r.expect_magic("CUQM", path);
        const uint32_t version = r.u32();
        if (version != 1) throw DataError(path + ": unsupported checkpoint version");
        ModelConfig cfg;
        cfg.in_channels = static_cast<int>(r.u32());
        cfg.base_filters = static_cast<int>(r.u32());
        cfg.depth = static_cast<int>(r.u32());
        cfg.blocks_per_level = static_cast<int>(r.u32());
        cfg.b_min = r.f32();
        ResUNet<T> model(cfg);
        const uint32_t count = r.u32();
        if (count != model.params.items.size())
            throw DataError(path + ": checkpoint tensor count does not match config");
        for (uint32_t i = 0; i < count; ++i) {
            const uint16_t name_len = r.u16();
            std::string name(name_len, '\0');
            r.bytes(name.data(), name_len);
            auto& t = model.params.items[i];
            if (name != t.name)
                throw DataError(path + ": unexpected tensor '" + name + "' (expected '" +
                                t.name + "')");
            const uint8_t rank = r.u8();
            if (rank != t.dims.size()) throw DataError(path + ": tensor rank mismatch");
            for (uint8_t d = 0; d < rank; ++d)
                if (r.u32() != t.dims[d])
                    throw DataError(path + ": tensor shape mismatch for '" + name + "'");
            for (auto& v : t.v) v = static_cast<T>(r.f32());
        }
        return model;
    }

private:
    struct ConvRef {
        size_t w_idx = 0;
        size_t b_idx = SIZE_MAX;
        int k = 1;
        int stride = 1;
        int in_c = 0;
        int out_c = 0;
    };
    struct BnRef {
        size_t gamma = 0, beta = 0, rmean = 0, rvar = 0;
        int c = 0;
    };
    struct ResBlockRef {
        BnRef bn1;
        ConvRef conv1;
        BnRef bn2;
        ConvRef conv2;
    };

    static bool ends_with(const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() &&
               s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    }

    int level_channels(int level) const { return cfg.base_filters << level; }

    ConvRef add_conv(const std::string& name, int k, int stride, int in_c, int out_c,
                     bool bias = false) {
        ConvRef ref;
        ref.k = k;
        ref.stride = stride;
        ref.in_c = in_c;
        ref.out_c = out_c;
        ref.w_idx = params.add(name + ".w",
                               {static_cast<uint32_t>(k), static_cast<uint32_t>(k),
                                static_cast<uint32_t>(in_c), static_cast<uint32_t>(out_c)});
        if (bias) ref.b_idx = params.add(name + ".bias", {static_cast<uint32_t>(out_c)});
        return ref;
    }

    BnRef add_bn(const std::string& name, int c) {
        BnRef ref;
        ref.c = c;
        ref.gamma = params.add(name + ".gamma", {static_cast<uint32_t>(c)});
        ref.beta = params.add(name + ".beta", {static_cast<uint32_t>(c)});
        ref.rmean = params.add(name + ".running_mean", {static_cast<uint32_t>(c)}, false);
        ref.rvar = params.add(name + ".running_var", {static_cast<uint32_t>(c)}, false);
        return ref;
    }

    ResBlockRef add_block(const std::string& name, int c) {
        ResBlockRef blk;
        blk.bn1 = add_bn(name + ".bn1", c);
        blk.conv1 = add_conv(name + ".conv1", 3, 1, c, c);
        blk.bn2 = add_bn(name + ".bn2", c);
        blk.conv2 = add_conv(name + ".conv2", 3, 1, c, c);
        return blk;
    }

    void build_layout() {
        const int f = cfg.base_filters;
        stem_conv_ = add_conv("stem.conv", 1, 1, cfg.in_channels, f);
        stem_bn_ = add_bn("stem.bn", f);
        enc_.resize(cfg.depth);
        down_.resize(cfg.depth);
        for (int l = 0; l < cfg.depth; ++l) {
            const int ch = level_channels(l);
            for (int b = 0; b < cfg.blocks_per_level; ++b)
                enc_[l].push_back(
                    add_block("enc" + std::to_string(l) + ".block" + std::to_string(b), ch));
            down_[l] = add_conv("down" + std::to_string(l) + ".conv", 1, 2, ch, ch * 2);
        }
        const int bottom_ch = level_channels(cfg.depth);
        for (int b = 0; b < cfg.blocks_per_level; ++b)
            bottleneck_.push_back(add_block("bottom.block" + std::to_string(b), bottom_ch));
        up_conv_.resize(cfg.depth);
        up_bn_.resize(cfg.depth);
        comb_conv_.resize(cfg.depth);
        comb_bn_.resize(cfg.depth);
        dec_.resize(cfg.depth);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            const int ch = level_channels(l);
            const std::string base = "dec" + std::to_string(l);
            up_conv_[l] = add_conv(base + ".up.conv", 1, 1, ch * 2, ch);
            up_bn_[l] = add_bn(base + ".up.bn", ch);
            comb_conv_[l] = add_conv(base + ".combine.conv", 1, 1, ch * 2, ch);
            comb_bn_[l] = add_bn(base + ".combine.bn", ch);
            for (int b = 0; b < cfg.blocks_per_level; ++b)
                dec_[l].push_back(add_block(base + ".block" + std::to_string(b), ch));
        }
        head_ = add_conv("head.conv", 1, 1, f, 2, /*bias=*/true);
    }

    Tensor4<T> conv_fwd(const ConvRef& ref, const Tensor4<T>& x, Tape* tape) {
        if (tape) tape->conv_x.push_back(x);
        const auto& w = params[ref.w_idx].v;
        const std::vector<T>* bias = ref.b_idx != SIZE_MAX ? &params[ref.b_idx].v : nullptr;
        return nn::conv2d_forward(x, w, bias, ref.k, ref.stride, ref.out_c);
    }

    Tensor4<T> conv_bwd(const ConvRef& ref, const Tensor4<T>& dy, Tape& tape,
                        ParamStore<T>& grads) {
        Tensor4<T> x = std::move(tape.conv_x.back());
        tape.conv_x.pop_back();
        std::vector<T>* dbias = ref.b_idx != SIZE_MAX ? &grads[ref.b_idx].v : nullptr;
        return nn::conv2d_backward(x, params[ref.w_idx].v, dy, ref.k, ref.stride, ref.out_c,
                                   grads[ref.w_idx].v, dbias);
    }

    Tensor4<T> bn_fwd(const BnRef& ref, const Tensor4<T>& x, bool training, Tape* tape) {
        nn::BnCache<T>* cache = nullptr;
        if (tape) {
            tape->bn.emplace_back();
            cache = &tape->bn.back();
        }
        return nn::batchnorm_forward(x, params[ref.gamma].v, params[ref.beta].v,
                                     params[ref.rmean].v, params[ref.rvar].v, training,
                                     kBnMomentum, kBnEps, cache);
    }

    Tensor4<T> bn_bwd(const BnRef& ref, const Tensor4<T>& dy, Tape& tape,
                      ParamStore<T>& grads) {
        nn::BnCache<T> cache = std::move(tape.bn.back());
        tape.bn.pop_back();
        return nn::batchnorm_backward(dy, cache, params[ref.gamma].v, grads[ref.gamma].v,
                                      grads[ref.beta].v);
    }

    Tensor4<T> relu_fwd(const Tensor4<T>& x, Tape* tape) {
        if (tape) tape->relu_x.push_back(x);
        return nn::relu_forward(x);
    }

    Tensor4<T> relu_bwd(const Tensor4<T>& dy, Tape& tape) {
        Tensor4<T> x = std::move(tape.relu_x.back());
        tape.relu_x.pop_back();
        return nn::relu_backward(dy, x);
    }

    // Pre-activation residual block: bn-relu-conv-bn-relu-conv plus skip.
    Tensor4<T> block_fwd(const ResBlockRef& blk, const Tensor4<T>& x, bool training,
                         Tape* tape) {
        Tensor4<T> t = bn_fwd(blk.bn1, x, training, tape);
        t = relu_fwd(t, tape);
        t = conv_fwd(blk.conv1, t, tape);
        t = bn_fwd(blk.bn2, t, training, tape);
        t = relu_fwd(t, tape);
        t = conv_fwd(blk.conv2, t, tape);
        for (size_t i = 0; i < t.v.size(); ++i) t.v[i] += x.v[i];
        return t;
    }

    Tensor4<T> block_bwd(const ResBlockRef& blk, const Tensor4<T>& dy, Tape& tape,
                         ParamStore<T>& grads) {
        Tensor4<T> d = conv_bwd(blk.conv2, dy, tape, grads);
        d = relu_bwd(d, tape);
        d = bn_bwd(blk.bn2, d, tape, grads);
        d = conv_bwd(blk.conv1, d, tape, grads);
        d = relu_bwd(d, tape);
        d = bn_bwd(blk.bn1, d, tape, grads);
        for (size_t i = 0; i < d.v.size(); ++i) d.v[i] += dy.v[i];
        return d;
    }

    static constexpr double kBnMomentum = 0.99;
    static constexpr double kBnEps = 1e-5;

    ConvRef stem_conv_;
    BnRef stem_bn_;
    std::vector<std::vector<ResBlockRef>> enc_;
    std::vector<ConvRef> down_;
    std::vector<ResBlockRef> bottleneck_;
    std::vector<ConvRef> up_conv_;
    std::vector<BnRef> up_bn_;
    std::vector<ConvRef> comb_conv_;
    std::vector<BnRef> comb_bn_;
    std::vector<std::vector<ResBlockRef>> dec_;
    ConvRef head_;
};

using ResUNetF = ResUNet<float>;

}  // namespace canopyuq
