#pragma once

// Masked, density-weighted Laplace negative log-likelihood with analytic
// gradients, Adam with decoupled L2 decay and global-norm gradient clipping,
// a cosine learning-rate schedule, and the epoch loop over patch records.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "canopyuq/core.hpp"
#include "canopyuq/dataset.hpp"
#include "canopyuq/model.hpp"
#include "canopyuq/weighting.hpp"

namespace canopyuq {

struct TrainConfig {
    double lr0 = 1e-4;
    int epochs = 50;
    int batch = 256;
    double clip_norm = 1.0;
    double weight_decay = 1e-5;  // "10e-5" in common notation reads 1e-5; see README
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 0;
    // The published loss divides by N*w^2; this switches to dividing by the
    // number of valid pixels instead.
    bool normalize_by_valid = false;

    void validate() const {
        if (!(lr0 >= 0.0) || epochs < 1 || batch < 1)
            throw ArgError("TrainConfig: lr0 >= 0, epochs/batch >= 1 required");
        if (!(clip_norm > 0.0)) throw ArgError("TrainConfig: clip_norm must be positive");
        if (!(weight_decay >= 0.0)) throw ArgError("TrainConfig: weight_decay must be >= 0");
    }
};

struct LossBreakdown {
    double total = 0.0;              // normalized NLL
    double mean_abs_residual = 0.0;  // meters, over valid pixels
    double mean_log_scale = 0.0;     // log(2b), over valid pixels
    int64_t valid_count = 0;
};

namespace detail {

template <typename T>
inline double pixel_weight(const WeightFunction* wf, T y) {
    if (!wf) return 1.0;
    return wf->weight(static_cast<double>(y));
}

}  // namespace detail

// total = norm * sum_i sum_{jk in V} f_w(y) * [ |mu - y| / b + log(2b) ],
// norm = 1/(N*w^2) (or 1/valid_count with normalize_by_valid).
template <typename T>
LossBreakdown laplace_nll(const LaplaceFieldBatch<T>& pred, const Tensor4<T>& target,
                          const Tensor4<uint8_t>& mask, const WeightFunction* wf = nullptr,
                          bool normalize_by_valid = false) {
    if (!pred.mu.same_shape(target) || target.n != mask.n || target.h != mask.h ||
        target.w != mask.w)
        throw ArgError("laplace_nll: shape mismatch");
    double sum = 0.0, sum_abs = 0.0, sum_log = 0.0;
    int64_t valid = 0;
    for (size_t p = 0; p < target.pixels(); ++p) {
        if (!mask.v[p]) continue;
        const double mu = pred.mu.v[p];
        const double b = pred.b.v[p];
        const double y = target.v[p];
        const double f = detail::pixel_weight(wf, y);
        const double abs_res = std::abs(mu - y);
        const double log_term = std::log(2.0 * b);
        sum += f * (abs_res / b + log_term);
        sum_abs += abs_res;
        sum_log += log_term;
        ++valid;
    }
    if (valid == 0) throw DataError("laplace_nll: batch has zero valid pixels");
    const double norm = normalize_by_valid
                            ? 1.0 / static_cast<double>(valid)
                            : 1.0 / (static_cast<double>(target.n) *
                                     static_cast<double>(target.h) * target.w);
    LossBreakdown out;
    out.total = sum * norm;
    out.mean_abs_residual = sum_abs / static_cast<double>(valid);
    out.mean_log_scale = sum_log / static_cast<double>(valid);
    out.valid_count = valid;
    return out;
}

// dL/dmu = f * sign(mu - y) / b, dL/db = f * (1/b - |mu - y| / b^2), both
// scaled by the loss normalization and zero on masked pixels. sign(0) = 0.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> loss_gradients(const LaplaceFieldBatch<T>& pred,
                                                 const Tensor4<T>& target,
                                                 const Tensor4<uint8_t>& mask,
                                                 const WeightFunction* wf = nullptr,
                                                 bool normalize_by_valid = false) {
    if (!pred.mu.same_shape(target))
        throw ArgError("loss_gradients: shape mismatch");
    int64_t valid = 0;
    for (size_t p = 0; p < mask.v.size(); ++p) valid += mask.v[p] ? 1 : 0;
    if (valid == 0) throw DataError("loss_gradients: batch has zero valid pixels");
    const double norm = normalize_by_valid
                            ? 1.0 / static_cast<double>(valid)
                            : 1.0 / (static_cast<double>(target.n) *
                                     static_cast<double>(target.h) * target.w);
    Tensor4<T> dmu(target.n, target.h, target.w, 1);
    Tensor4<T> db(target.n, target.h, target.w, 1);
    for (size_t p = 0; p < target.pixels(); ++p) {
        if (!mask.v[p]) continue;
        const double mu = pred.mu.v[p];
        const double b = pred.b.v[p];
        const double y = target.v[p];
        const double f = detail::pixel_weight(wf, y) * norm;
        const double r = mu - y;
        const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
        dmu.v[p] = static_cast<T>(f * s / b);
        db.v[p] = static_cast<T>(f * (1.0 / b - std::abs(r) / (b * b)));
    }
    return {std::move(dmu), std::move(db)};
}

// lr = lr0 * 0.5 * (1 + cos(pi * step / total_steps)); no restarts.
inline double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
    if (total_steps <= 0) throw ArgError("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) throw ArgError("cosine_lr: step out of range");
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                       static_cast<double>(total_steps)));
}

template <typename T>
struct AdamState {
    ParamStore<T> m;
    ParamStore<T> v;
    int64_t step = 0;

    template <typename Model>
    static AdamState make(const Model& model) {
        AdamState s;
        s.m = model.params.zeros_like();
        s.v = model.params.zeros_like();
        return s;
    }
};

// Global gradient norm over trainable tensors, accumulated in double.
template <typename T>
double global_grad_norm(const ParamStore<T>& grads) {
    double sq = 0.0;
    for (const auto& t : grads.items) {
        if (!t.trainable) continue;
        for (const T g : t.v) {
            const double gd = static_cast<double>(g);
            if (!std::isfinite(gd))
                throw NumericError("adam_step: non-finite gradient in '" + t.name + "'");
            sq += gd * gd;
        }
    }
    return std::sqrt(sq);
}

// Clip to clip_norm, apply decoupled decay (p -= lr*wd*p), then the standard
// bias-corrected Adam update.
template <typename T>
void adam_step(ParamStore<T>& params, ParamStore<T>& grads, AdamState<T>& state, double lr,
               const TrainConfig& cfg) {
    const double norm = global_grad_norm(grads);
    if (norm > cfg.clip_norm && norm > 0.0) {
        const T scale = static_cast<T>(cfg.clip_norm / norm);
        for (auto& t : grads.items) {
            if (!t.trainable) continue;
            for (T& g : t.v) g *= scale;
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.items.size(); ++i) {
        auto& p = params.items[i];
        if (!p.trainable) continue;
        const auto& g = grads.items[i];
        auto& m = state.m.items[i];
        auto& v = state.v.items[i];
        for (size_t j = 0; j < p.v.size(); ++j) {
            const double pj = static_cast<double>(p.v[j]) * (1.0 - lr * cfg.weight_decay);
            const double gj = g.v[j];
            const double mj = cfg.beta1 * m.v[j] + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * v.v[j] + (1.0 - cfg.beta2) * gj * gj;
            m.v[j] = static_cast<T>(mj);
            v.v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            p.v[j] = static_cast<T>(pj - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// Batch assembly from records; covariates are expected pre-normalized.
template <typename T>
struct Batch {
    Tensor4<T> x;
    Tensor4<T> target;
    Tensor4<uint8_t> mask;
};

template <typename T>
Batch<T> make_batch(const std::vector<PatchRecord>& records,
                    const std::vector<size_t>& indices) {
    if (indices.empty()) throw ArgError("make_batch: empty index list");
    const int w = records[indices[0]].w;
    const int c = records[indices[0]].c;
    Batch<T> batch;
    batch.x = Tensor4<T>(static_cast<int>(indices.size()), w, w, c);
    batch.target = Tensor4<T>(static_cast<int>(indices.size()), w, w, 1);
    batch.mask = Tensor4<uint8_t>(static_cast<int>(indices.size()), w, w, 1);
    for (size_t bi = 0; bi < indices.size(); ++bi) {
        const PatchRecord& rec = records[indices[bi]];
        if (rec.w != w || rec.c != c) throw DataError("make_batch: mixed record shapes");
        const size_t np = static_cast<size_t>(w) * w;
        for (size_t i = 0; i < np * c; ++i)
            batch.x.v[bi * np * c + i] = static_cast<T>(rec.covariates[i]);
        for (size_t i = 0; i < np; ++i) {
            batch.target.v[bi * np + i] = static_cast<T>(rec.target[i]);
            batch.mask.v[bi * np + i] = rec.valid[i];
        }
    }
    return batch;
}

struct EpochLog {
    int epoch = 0;
    double train_nll = 0.0;
    double val_nll = 0.0;
    double lr = 0.0;
};

// Train one model on one (train, validation) record split. Deterministic
// given cfg.seed (floating-point reduction order is fixed).
template <typename T>
ResUNet<T> train_model(const std::vector<PatchRecord>& train_records,
                       const std::vector<PatchRecord>& val_records,
                       const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                       const WeightFunction* wf = nullptr,
                       std::vector<EpochLog>* log = nullptr,
                       const std::function<void(const EpochLog&)>& on_epoch = {}) {
    train_cfg.validate();
    if (train_records.empty()) throw DataError("train_model: empty training split");

    ResUNet<T> model(model_cfg);
    model.init_params(train_cfg.seed);
    AdamState<T> adam = AdamState<T>::make(model);

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(train_records.size()) + train_cfg.batch - 1) / train_cfg.batch;
    const int64_t total_steps = steps_per_epoch * train_cfg.epochs;
    int64_t step = 0;

    std::vector<size_t> order(train_records.size());
    std::iota(order.begin(), order.end(), size_t{0});

    const auto eval_nll = [&](const std::vector<PatchRecord>& records) {
        if (records.empty()) return 0.0;
        double total = 0.0;
        int64_t batches = 0;
        for (size_t begin = 0; begin < records.size();
             begin += static_cast<size_t>(train_cfg.batch)) {
            const size_t end =
                std::min(records.size(), begin + static_cast<size_t>(train_cfg.batch));
            std::vector<size_t> idx(end - begin);
            std::iota(idx.begin(), idx.end(), begin);
            Batch<T> batch = make_batch<T>(records, idx);
            auto pred = model.forward(batch.x, /*training=*/false);
            total += laplace_nll(pred, batch.target, batch.mask, wf,
                                 train_cfg.normalize_by_valid)
                         .total;
            ++batches;
        }
        return total / static_cast<double>(batches);
    };

    for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        Rng shuffle_rng(train_cfg.seed ^ (0xE0C5ULL + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        int64_t epoch_batches = 0;
        double lr = train_cfg.lr0;
        for (size_t begin = 0; begin < order.size();
             begin += static_cast<size_t>(train_cfg.batch)) {
            const size_t end =
                std::min(order.size(), begin + static_cast<size_t>(train_cfg.batch));
            const std::vector<size_t> idx(order.begin() + begin, order.begin() + end);
            Batch<T> batch = make_batch<T>(train_records, idx);

            typename ResUNet<T>::Tape tape;
            auto pred = model.forward(batch.x, /*training=*/true, &tape);
            const LossBreakdown loss = laplace_nll(pred, batch.target, batch.mask, wf,
                                                   train_cfg.normalize_by_valid);
            if (!std::isfinite(loss.total))
                throw NumericError("train_model: non-finite loss at step " +
                                   std::to_string(step));
            auto [dmu, db] = loss_gradients(pred, batch.target, batch.mask, wf,
                                            train_cfg.normalize_by_valid);
            ParamStore<T> grads = model.backward(tape, dmu, db);
            lr = cosine_lr(step, total_steps, train_cfg.lr0);
            adam_step(model.params, grads, adam, lr, train_cfg);
            ++step;
            epoch_loss += loss.total;
            ++epoch_batches;
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.train_nll = epoch_loss / static_cast<double>(epoch_batches);
        entry.val_nll = eval_nll(val_records);
        entry.lr = lr;
        if (log) log->push_back(entry);
        if (on_epoch) on_epoch(entry);
    }
    return model;
}

}  // namespace canopyuq
