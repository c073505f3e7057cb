// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ldae/pipeline.hpp"
#include "ldae/types.hpp"

namespace ldae {

/// Shape of the time-conditioned transformer. Blocks [0, depth/2) are the
/// encoder, the rest the decoder.
struct DenoiserConfig {
    Index input_dim = 0;
    Index output_dim = 0;
    Index patch_grid = 8; // tokens per side
    Index width = 64;
    int depth = 8;
    int heads = 4;
    Index cond_hidden = 16; // width / 4
    Index time_embed_dim = 64;
    int steps = 1000; // T

    static DenoiserConfig make(Index input_dim, Index output_dim, Index patch_grid, Index width = 64, int depth = 8,
                               int heads = 4, int steps = 1000);

    Index tokens() const { return patch_grid * patch_grid; }
    Index mlp_hidden() const { return 4 * width; }
    Index head_dim() const { return width / heads; }
    int encoder_depth() const { return depth / 2; }
    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

/// Weights of one block. Linear maps are stored out x in and applied as
/// y = x W^T + b^T on row-token activations; biases are column vectors.
template <typename Scalar>
struct BlockParams {
    MatrixX<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
    MatrixX<Scalar> w1, b1, w2, b2;
    // Two-layer conditioning MLP: time embedding -> cond_hidden -> 4 * width,
    // read as (shift1, scale1, shift2, scale2).
    MatrixX<Scalar> c1, cb1, c2, cb2;
};

template <typename Scalar>
struct DenoiserParams {
    DenoiserConfig config;
    MatrixX<Scalar> w_in, b_in, pos;
    std::vector<BlockParams<Scalar>> blocks;
    MatrixX<Scalar> w_out, b_out;

    /// All tensors zero, shaped by config.
    static DenoiserParams zeros(const DenoiserConfig& config);

    Index parameter_count() const;

    template <typename Other>
    DenoiserParams<Other> cast() const;
};

/// Calls f(name, tensor) for every tensor in a fixed order.
template <typename Params, typename F>
void visit_tensors(Params& p, F&& f) {
    f("w_in", p.w_in);
    f("b_in", p.b_in);
    f("pos", p.pos);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string k = "block" + std::to_string(i) + ".";
        f(k + "wq", b.wq);
        f(k + "bq", b.bq);
        f(k + "wk", b.wk);
        f(k + "bk", b.bk);
        f(k + "wv", b.wv);
        f(k + "bv", b.bv);
        f(k + "wo", b.wo);
        f(k + "bo", b.bo);
        f(k + "w1", b.w1);
        f(k + "b1", b.b1);
        f(k + "w2", b.w2);
        f(k + "b2", b.b2);
        f(k + "c1", b.c1);
        f(k + "cb1", b.cb1);
        f(k + "c2", b.c2);
        f(k + "cb2", b.cb2);
    }
    f("w_out", p.w_out);
    f("b_out", p.b_out);
}

template <typename Scalar>
template <typename Other>
DenoiserParams<Other> DenoiserParams<Scalar>::cast() const {
    DenoiserParams<Other> out = DenoiserParams<Other>::zeros(config);
    std::vector<const MatrixX<Scalar>*> src;
    visit_tensors(*this, [&](const std::string&, const MatrixX<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    visit_tensors(out, [&](const std::string&, MatrixX<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
}

/// Xavier-scaled Gaussian weights, zero biases, N(0, 0.02^2) position
/// embeddings. Conditioning output layers and the output projection start
/// at zero.
template <typename Scalar>
DenoiserParams<Scalar> init_params(const DenoiserConfig& config, std::uint64_t seed);

/// Sinusoidal embedding of t: [cos(t f_i), sin(t f_i)], f_i = 10000^(-i/half).
template <typename Scalar>
VectorX<Scalar> time_embedding(int t, Index dim);

/// Network output for one token grid.
template <typename Scalar>
MatrixX<Scalar> forward(const DenoiserParams<Scalar>& params, const MatrixX<Scalar>& input, int t);

/// Per-example loss callback: fills d loss / d pred and returns the loss.
using LossGradFn = std::function<double(std::size_t example, const MatrixX<double>& pred, MatrixX<double>& grad)>;

struct BackwardResult {
    double loss = 0.0;
    std::vector<double> example_losses;
};

/// Mean loss over the batch and its exact gradient, written into `grads`
/// (resized and overwritten). Non-finite losses raise with the example index.
template <typename Scalar>
BackwardResult backward(const DenoiserParams<Scalar>& params, std::span<const MatrixX<Scalar>> inputs,
                        std::span<const int> ts, const LossGradFn& loss, DenoiserParams<Scalar>& grads);

/// Average-pooled output of the first `enc_blocks` blocks at fixed t.
template <typename Scalar>
VectorX<Scalar> encoder_features(const DenoiserParams<Scalar>& params, const MatrixX<Scalar>& input, int t,
                                 int enc_blocks);

/// Encoder with conditioning folded into constant LayerNorm affine
/// parameters, valid for one fixed t.
template <typename Scalar>
struct MergedBlock {
    MatrixX<Scalar> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    MatrixX<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
    MatrixX<Scalar> w1, b1, w2, b2;
};

template <typename Scalar>
struct MergedEncoder {
    DenoiserConfig config;
    int t = 0;
    MatrixX<Scalar> w_in, b_in, pos;
    std::vector<MergedBlock<Scalar>> blocks;

    Index parameter_count() const;
};

template <typename Scalar>
MergedEncoder<Scalar> merge_encoder(const DenoiserParams<Scalar>& params, int t, int enc_blocks);

template <typename Scalar>
VectorX<Scalar> merged_features(const MergedEncoder<Scalar>& encoder, const MatrixX<Scalar>& input);

struct OptimizerConfig {
    double base_lr = 4e-3;
    int batch_size = 64;
    int epochs = 20;
    int warmup_epochs = 2;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0.0;

    double effective_lr() const { return base_lr * batch_size / 256.0; }
};

/// Linear warmup from 0, then half-cycle cosine to 0 at the last step.
double learning_rate(const OptimizerConfig& cfg, long step, long steps_per_epoch);

template <typename Scalar>
struct OptimizerState {
    long step = 0;
    DenoiserParams<Scalar> first_moment;
    DenoiserParams<Scalar> second_moment;
};

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const DenoiserConfig& config);

/// One Adam update with the given learning rate.
template <typename Scalar>
void adam_step(DenoiserParams<Scalar>& params, const DenoiserParams<Scalar>& grads, OptimizerState<Scalar>& state,
               const OptimizerConfig& cfg, double lr);

struct TrainConfig {
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    /// Examples in the fixed-noise evaluation set behind initial/final loss.
    int eval_examples = 256;
    std::function<void(int epoch, double loss)> on_epoch;
};

struct TrainResult {
    std::vector<double> epoch_loss;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    long steps = 0;
};

/// Trains on clean patch grids, drawing t uniformly from [1, T] and noise
/// from per-(epoch, example) streams.
template <typename Scalar>
TrainResult train(DenoiserParams<Scalar>& params, const DenoisingTask& task,
                  std::span<const MatrixX<double>> x0_patches, const TrainConfig& cfg);

/// Mean loss over the first `count` examples with noise from a fixed stream.
template <typename Scalar>
double evaluation_loss(const DenoiserParams<Scalar>& params, const DenoisingTask& task,
                       std::span<const MatrixX<double>> x0_patches, int count, std::uint64_t seed);

constexpr std::uint32_t kDenoiserKindTag = 16;

template <typename Scalar>
std::vector<std::uint8_t> serialize_denoiser(const DenoiserParams<Scalar>& params);
template <typename Scalar>
DenoiserParams<Scalar> deserialize_denoiser(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");
template <typename Scalar>
void save_denoiser(const DenoiserParams<Scalar>& params, const std::filesystem::path& path);
template <typename Scalar>
DenoiserParams<Scalar> load_denoiser(const std::filesystem::path& path);

/// Order-sensitive FNV-1a over every parameter bit pattern.
template <typename Scalar>
std::uint64_t params_checksum(const DenoiserParams<Scalar>& params);

} // namespace ldae
