// SPDX-License-Identifier: Apache-2.0
#include "ldae/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "ldae/checkpoint.hpp"
#include "ldae/image.hpp"
#include "ldae/rng.hpp"

namespace ldae {

DenoiserConfig DenoiserConfig::make(Index input_dim, Index output_dim, Index patch_grid, Index width, int depth,
                                    int heads, int steps) {
    DenoiserConfig c;
    c.input_dim = input_dim;
    c.output_dim = output_dim;
    c.patch_grid = patch_grid;
    c.width = width;
    c.depth = depth;
    c.heads = heads;
    c.cond_hidden = width / 4;
    c.steps = steps;
    c.validate();
    return c;
}

void DenoiserConfig::validate() const {
    if (input_dim < 1 || output_dim < 1 || patch_grid < 1 || width < 4) {
        throw std::invalid_argument("denoiser config: dimensions must be positive (width >= 4)");
    }
    if (depth < 2 || depth % 2 != 0) {
        throw std::invalid_argument("denoiser config: depth must be even and >= 2, got " + std::to_string(depth));
    }
    if (heads < 1 || width % heads != 0) {
        throw std::invalid_argument("denoiser config: width " + std::to_string(width) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    if (cond_hidden != width / 4) {
        throw std::invalid_argument("denoiser config: conditioning hidden size must be width / 4");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
        throw std::invalid_argument("denoiser config: time embedding size must be even");
    }
    if (steps < 1) {
        throw std::invalid_argument("denoiser config: T must be positive");
    }
}

template <typename Scalar>
DenoiserParams<Scalar> DenoiserParams<Scalar>::zeros(const DenoiserConfig& c) {
    c.validate();
    using M = MatrixX<Scalar>;
    const Index w = c.width;
    const Index hid = c.mlp_hidden();
    DenoiserParams p;
    p.config = c;
    p.w_in = M::Zero(w, c.input_dim);
    p.b_in = M::Zero(w, 1);
    p.pos = M::Zero(c.tokens(), w);
    p.blocks.resize(static_cast<std::size_t>(c.depth));
    for (auto& b : p.blocks) {
        b.wq = M::Zero(w, w);
        b.wk = M::Zero(w, w);
        b.wv = M::Zero(w, w);
        b.wo = M::Zero(w, w);
        b.bq = M::Zero(w, 1);
        b.bk = M::Zero(w, 1);
        b.bv = M::Zero(w, 1);
        b.bo = M::Zero(w, 1);
        b.w1 = M::Zero(hid, w);
        b.b1 = M::Zero(hid, 1);
        b.w2 = M::Zero(w, hid);
        b.b2 = M::Zero(w, 1);
        b.c1 = M::Zero(c.cond_hidden, c.time_embed_dim);
        b.cb1 = M::Zero(c.cond_hidden, 1);
        b.c2 = M::Zero(4 * w, c.cond_hidden);
        b.cb2 = M::Zero(4 * w, 1);
    }
    p.w_out = M::Zero(c.output_dim, w);
    p.b_out = M::Zero(c.output_dim, 1);
    return p;
}

template <typename Scalar>
Index DenoiserParams<Scalar>::parameter_count() const {
    Index n = 0;
    visit_tensors(*this, [&](const std::string&, const MatrixX<Scalar>& m) { n += m.size(); });
    return n;
}

template <typename Scalar>
DenoiserParams<Scalar> init_params(const DenoiserConfig& config, std::uint64_t seed) {
    DenoiserParams<Scalar> p = DenoiserParams<Scalar>::zeros(config);
    Rng rng(seed);
    auto xavier = [&](MatrixX<Scalar>& m) {
        const double std = std::sqrt(2.0 / static_cast<double>(m.rows() + m.cols()));
        m = rng.normal_matrix<Scalar>(m.rows(), m.cols(), std);
    };
    xavier(p.w_in);
    p.pos = rng.normal_matrix<Scalar>(p.pos.rows(), p.pos.cols(), 0.02);
    for (auto& b : p.blocks) {
        xavier(b.wq);
        xavier(b.wk);
        xavier(b.wv);
        xavier(b.wo);
        xavier(b.w1);
        xavier(b.w2);
        xavier(b.c1);
    }
    return p;
}

template <typename Scalar>
VectorX<Scalar> time_embedding(int t, Index dim) {
    const Index half = dim / 2;
    VectorX<Scalar> e(dim);
    for (Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e(i) = static_cast<Scalar>(std::cos(t * freq));
        e(half + i) = static_cast<Scalar>(std::sin(t * freq));
    }
    return e;
}

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename S>
using Mat = MatrixX<S>;

template <typename S>
Mat<S> linear(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
    Mat<S> y = x * w.transpose();
    y.rowwise() += b.col(0).transpose();
    return y;
}

// dW += dy^T x, db += column sums of dy; returns dx = dy W.
template <typename S>
Mat<S> linear_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& w, Mat<S>& dw, Mat<S>& db) {
    dw.noalias() += dy.transpose() * x;
    db += dy.colwise().sum().transpose();
    return dy * w;
}

template <typename S>
void layer_norm(const Mat<S>& x, Mat<S>& xhat, VectorX<S>& inv_std) {
    const VectorX<S> mean = x.rowwise().mean();
    xhat = x.colwise() - mean;
    const VectorX<S> var = xhat.rowwise().squaredNorm() / static_cast<S>(x.cols());
    inv_std = (var.array() + static_cast<S>(kLayerNormEps)).rsqrt().matrix();
    xhat = inv_std.asDiagonal() * xhat;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dxhat, const Mat<S>& xhat, const VectorX<S>& inv_std) {
    const VectorX<S> m1 = dxhat.rowwise().mean();
    const VectorX<S> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
    Mat<S> dx = dxhat.colwise() - m1;
    dx -= m2.asDiagonal() * xhat;
    return inv_std.asDiagonal() * dx;
}

template <typename S>
Mat<S> gelu(const Mat<S>& x) {
    const auto a = x.array();
    const auto inner = static_cast<S>(kGeluC) * (a + static_cast<S>(kGeluA) * a.cube());
    return (static_cast<S>(0.5) * a * (static_cast<S>(1) + inner.tanh())).matrix();
}

template <typename S>
Mat<S> gelu_backward(const Mat<S>& dy, const Mat<S>& x) {
    const auto a = x.array();
    const auto th = (static_cast<S>(kGeluC) * (a + static_cast<S>(kGeluA) * a.cube())).tanh().eval();
    const auto dinner = static_cast<S>(kGeluC) * (static_cast<S>(1) + static_cast<S>(3 * kGeluA) * a.square());
    const auto d = static_cast<S>(0.5) * (static_cast<S>(1) + th) +
                   static_cast<S>(0.5) * a * (static_cast<S>(1) - th.square()) * dinner;
    return (dy.array() * d).matrix();
}

template <typename S>
Mat<S> silu(const Mat<S>& x) {
    const auto sig = (static_cast<S>(1) / (static_cast<S>(1) + (-x.array()).exp()));
    return (x.array() * sig).matrix();
}

template <typename S>
Mat<S> silu_backward(const Mat<S>& dy, const Mat<S>& x) {
    const auto sig = (static_cast<S>(1) / (static_cast<S>(1) + (-x.array()).exp())).eval();
    return (dy.array() * (sig + x.array() * sig * (static_cast<S>(1) - sig))).matrix();
}

// Rows [b N, (b + 1) N) use example b's (shift, scale): out = xhat (1 + scale) + shift.
template <typename S>
Mat<S> modulate(const Mat<S>& xhat, const Mat<S>& mod, Index shift_off, Index scale_off, Index tokens) {
    const Index w = xhat.cols();
    Mat<S> out(xhat.rows(), w);
    for (Index b = 0; b < mod.cols(); ++b) {
        const auto shift = mod.col(b).segment(shift_off, w);
        const auto scale = mod.col(b).segment(scale_off, w);
        out.middleRows(b * tokens, tokens) =
            ((xhat.middleRows(b * tokens, tokens).array().rowwise() * (scale.array() + static_cast<S>(1)).transpose())
                 .rowwise() +
             shift.array().transpose())
                .matrix();
    }
    return out;
}

template <typename S>
Mat<S> modulate_backward(const Mat<S>& dout, const Mat<S>& xhat, const Mat<S>& mod, Index shift_off,
                         Index scale_off, Index tokens, Mat<S>& dmod) {
    const Index w = xhat.cols();
    Mat<S> dxhat(xhat.rows(), w);
    for (Index b = 0; b < mod.cols(); ++b) {
        const auto d = dout.middleRows(b * tokens, tokens);
        const auto scale = mod.col(b).segment(scale_off, w);
        dmod.col(b).segment(shift_off, w) += d.colwise().sum().transpose();
        dmod.col(b).segment(scale_off, w) +=
            d.cwiseProduct(xhat.middleRows(b * tokens, tokens)).colwise().sum().transpose();
        dxhat.middleRows(b * tokens, tokens) =
            (d.array().rowwise() * (scale.array() + static_cast<S>(1)).transpose()).matrix();
    }
    return dxhat;
}

// Multi-head self-attention core on stacked examples; returns the
// concatenated head outputs before the output projection.
template <typename S>
Mat<S> attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, int heads, Index tokens,
                 std::vector<Mat<S>>* probs) {
    const Index batch = q.rows() / tokens;
    const Index hd = q.cols() / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    Mat<S> o(q.rows(), q.cols());
    if (probs) {
        probs->resize(static_cast<std::size_t>(batch * heads));
    }
    for (Index b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const auto qh = q.block(b * tokens, h * hd, tokens, hd);
            const auto kh = k.block(b * tokens, h * hd, tokens, hd);
            const auto vh = v.block(b * tokens, h * hd, tokens, hd);
            Mat<S> s = scale * (qh * kh.transpose());
            const VectorX<S> row_max = s.rowwise().maxCoeff();
            s = (s.colwise() - row_max).array().exp().matrix();
            const VectorX<S> inv_sum = s.rowwise().sum().cwiseInverse();
            s = inv_sum.asDiagonal() * s;
            o.block(b * tokens, h * hd, tokens, hd).noalias() = s * vh;
            if (probs) {
                (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
            }
        }
    }
    return o;
}

template <typename S>
void attention_backward(const Mat<S>& dout, const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                        const std::vector<Mat<S>>& probs, int heads, Index tokens, Mat<S>& dq, Mat<S>& dk,
                        Mat<S>& dv) {
    const Index batch = q.rows() / tokens;
    const Index hd = q.cols() / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    dq.resize(q.rows(), q.cols());
    dk.resize(q.rows(), q.cols());
    dv.resize(q.rows(), q.cols());
    for (Index b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Mat<S>& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto doh = dout.block(b * tokens, h * hd, tokens, hd);
            const auto qh = q.block(b * tokens, h * hd, tokens, hd);
            const auto kh = k.block(b * tokens, h * hd, tokens, hd);
            const auto vh = v.block(b * tokens, h * hd, tokens, hd);
            dv.block(b * tokens, h * hd, tokens, hd).noalias() = p.transpose() * doh;
            const Mat<S> dp = doh * vh.transpose();
            const VectorX<S> rowdot = dp.cwiseProduct(p).rowwise().sum();
            const Mat<S> ds = scale * p.cwiseProduct(dp.colwise() - rowdot);
            dq.block(b * tokens, h * hd, tokens, hd).noalias() = ds * kh;
            dk.block(b * tokens, h * hd, tokens, hd).noalias() = ds.transpose() * qh;
        }
    }
}

template <typename S>
struct BlockCache {
    Mat<S> h_in, xhat1, u, q, k, v, o, h_mid, xhat2, vmod, pre1, act1;
    VectorX<S> inv1, inv2;
    std::vector<Mat<S>> probs;
    Mat<S> c_pre, c_act, mod; // one column per example
};

template <typename S>
struct ForwardCache {
    Mat<S> x_in;
    Mat<S> emb;
    std::vector<BlockCache<S>> blocks;
    Mat<S> h_final, xhatf;
    VectorX<S> invf;
};

template <typename S>
Mat<S> stack_inputs(const DenoiserConfig& c, std::span<const Mat<S>> inputs) {
    const Index n = c.tokens();
    Mat<S> x(n * static_cast<Index>(inputs.size()), c.input_dim);
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        if (inputs[b].rows() != n || inputs[b].cols() != c.input_dim) {
            throw std::invalid_argument("denoiser: input " + std::to_string(b) + " is " +
                                        std::to_string(inputs[b].rows()) + "x" + std::to_string(inputs[b].cols()) +
                                        ", expected " + std::to_string(n) + "x" + std::to_string(c.input_dim));
        }
        x.middleRows(static_cast<Index>(b) * n, n) = inputs[b];
    }
    return x;
}

// Runs the input projection and the first `n_blocks` blocks. Returns the
// residual stream; fills `cache` when given.
template <typename S>
Mat<S> run_blocks(const DenoiserParams<S>& p, std::span<const Mat<S>> inputs, std::span<const int> ts, int n_blocks,
                  ForwardCache<S>* cache) {
    const DenoiserConfig& c = p.config;
    const Index n = c.tokens();
    const Index w = c.width;
    const auto batch = static_cast<Index>(inputs.size());
    if (ts.size() != inputs.size()) {
        throw std::invalid_argument("denoiser: one time step per input required");
    }
    for (int t : ts) {
        if (t < 0 || t > c.steps) {
            throw std::invalid_argument("denoiser: t = " + std::to_string(t) + " outside [0, " +
                                        std::to_string(c.steps) + "]");
        }
    }
    Mat<S> x = stack_inputs(c, inputs);
    Mat<S> h = linear(x, p.w_in, p.b_in);
    for (Index b = 0; b < batch; ++b) {
        h.middleRows(b * n, n) += p.pos;
    }
    Mat<S> emb(c.time_embed_dim, batch);
    for (Index b = 0; b < batch; ++b) {
        emb.col(b) = time_embedding<S>(ts[static_cast<std::size_t>(b)], c.time_embed_dim);
    }
    if (cache) {
        cache->x_in = std::move(x);
        cache->emb = emb;
        cache->blocks.resize(static_cast<std::size_t>(n_blocks));
    }
    for (int i = 0; i < n_blocks; ++i) {
        const BlockParams<S>& bp = p.blocks[static_cast<std::size_t>(i)];
        BlockCache<S> local;
        BlockCache<S>& bc = cache ? cache->blocks[static_cast<std::size_t>(i)] : local;
        bc.c_pre = (bp.c1 * emb).colwise() + bp.cb1.col(0);
        bc.c_act = silu(bc.c_pre);
        bc.mod = (bp.c2 * bc.c_act).colwise() + bp.cb2.col(0);

        layer_norm(h, bc.xhat1, bc.inv1);
        bc.u = modulate(bc.xhat1, bc.mod, 0, w, n);
        bc.q = linear(bc.u, bp.wq, bp.bq);
        bc.k = linear(bc.u, bp.wk, bp.bk);
        bc.v = linear(bc.u, bp.wv, bp.bv);
        bc.o = attention(bc.q, bc.k, bc.v, c.heads, n, cache ? &bc.probs : nullptr);
        Mat<S> h_mid = h + linear(bc.o, bp.wo, bp.bo);

        layer_norm(h_mid, bc.xhat2, bc.inv2);
        bc.vmod = modulate(bc.xhat2, bc.mod, 2 * w, 3 * w, n);
        bc.pre1 = linear(bc.vmod, bp.w1, bp.b1);
        bc.act1 = gelu(bc.pre1);
        Mat<S> h_out = h_mid + linear(bc.act1, bp.w2, bp.b2);
        if (cache) {
            bc.h_in = std::move(h);
            bc.h_mid = std::move(h_mid);
        }
        h = std::move(h_out);
    }
    return h;
}

template <typename S>
Mat<S> run_head(const DenoiserParams<S>& p, const Mat<S>& h, ForwardCache<S>* cache) {
    Mat<S> xhat;
    VectorX<S> inv;
    layer_norm(h, xhat, inv);
    Mat<S> out = linear(xhat, p.w_out, p.b_out);
    if (cache) {
        cache->h_final = h;
        cache->xhatf = std::move(xhat);
        cache->invf = std::move(inv);
    }
    return out;
}

} // namespace

template <typename Scalar>
MatrixX<Scalar> forward(const DenoiserParams<Scalar>& params, const MatrixX<Scalar>& input, int t) {
    const std::span<const MatrixX<Scalar>> inputs(&input, 1);
    const std::span<const int> ts(&t, 1);
    const Mat<Scalar> h = run_blocks<Scalar>(params, inputs, ts, params.config.depth, nullptr);
    return run_head<Scalar>(params, h, nullptr);
}

template <typename Scalar>
BackwardResult backward(const DenoiserParams<Scalar>& params, std::span<const MatrixX<Scalar>> inputs,
                        std::span<const int> ts, const LossGradFn& loss, DenoiserParams<Scalar>& grads) {
    using S = Scalar;
    const DenoiserConfig& c = params.config;
    if (inputs.empty()) {
        throw std::invalid_argument("backward: empty batch");
    }
    const Index n = c.tokens();
    const Index w = c.width;
    const auto batch = static_cast<Index>(inputs.size());

    ForwardCache<S> cache;
    const Mat<S> h = run_blocks<S>(params, inputs, ts, c.depth, &cache);
    const Mat<S> out = run_head<S>(params, h, &cache);

    BackwardResult result;
    result.example_losses.resize(inputs.size());
    Mat<S> dout(out.rows(), out.cols());
    const double inv_batch = 1.0 / static_cast<double>(batch);
    for (Index b = 0; b < batch; ++b) {
        const MatrixX<double> pred = out.middleRows(b * n, n).template cast<double>();
        MatrixX<double> g;
        const double l = loss(static_cast<std::size_t>(b), pred, g);
        if (!std::isfinite(l)) {
            throw std::runtime_error("backward: non-finite loss for batch example " + std::to_string(b));
        }
        if (g.rows() != pred.rows() || g.cols() != pred.cols()) {
            throw std::invalid_argument("backward: loss gradient has the wrong shape");
        }
        result.example_losses[static_cast<std::size_t>(b)] = l;
        result.loss += l * inv_batch;
        dout.middleRows(b * n, n) = (g * inv_batch).template cast<S>();
    }

    grads = DenoiserParams<S>::zeros(c);
    Mat<S> dxhat = linear_backward(dout, cache.xhatf, params.w_out, grads.w_out, grads.b_out);
    Mat<S> dh = layer_norm_backward(dxhat, cache.xhatf, cache.invf);

    for (int i = c.depth - 1; i >= 0; --i) {
        const BlockParams<S>& bp = params.blocks[static_cast<std::size_t>(i)];
        BlockParams<S>& gb = grads.blocks[static_cast<std::size_t>(i)];
        const BlockCache<S>& bc = cache.blocks[static_cast<std::size_t>(i)];
        Mat<S> dmod = Mat<S>::Zero(4 * w, batch);

        // MLP branch
        Mat<S> dact = linear_backward(dh, bc.act1, bp.w2, gb.w2, gb.b2);
        const Mat<S> dpre = gelu_backward(dact, bc.pre1);
        const Mat<S> dvmod = linear_backward(dpre, bc.vmod, bp.w1, gb.w1, gb.b1);
        const Mat<S> dxhat2 = modulate_backward(dvmod, bc.xhat2, bc.mod, 2 * w, 3 * w, n, dmod);
        Mat<S> dh_mid = dh + layer_norm_backward(dxhat2, bc.xhat2, bc.inv2);

        // attention branch
        const Mat<S> d_o = linear_backward(dh_mid, bc.o, bp.wo, gb.wo, gb.bo);
        Mat<S> dq, dk, dv;
        attention_backward(d_o, bc.q, bc.k, bc.v, bc.probs, c.heads, n, dq, dk, dv);
        Mat<S> du = linear_backward(dq, bc.u, bp.wq, gb.wq, gb.bq);
        du += linear_backward(dk, bc.u, bp.wk, gb.wk, gb.bk);
        du += linear_backward(dv, bc.u, bp.wv, gb.wv, gb.bv);
        const Mat<S> dxhat1 = modulate_backward(du, bc.xhat1, bc.mod, 0, w, n, dmod);
        dh = dh_mid + layer_norm_backward(dxhat1, bc.xhat1, bc.inv1);

        // conditioning MLP
        gb.c2.noalias() += dmod * bc.c_act.transpose();
        gb.cb2 += dmod.rowwise().sum();
        const Mat<S> dc_pre = silu_backward(Mat<S>(bp.c2.transpose() * dmod), bc.c_pre);
        gb.c1.noalias() += dc_pre * cache.emb.transpose();
        gb.cb1 += dc_pre.rowwise().sum();
    }

    grads.w_in.noalias() += dh.transpose() * cache.x_in;
    grads.b_in += dh.colwise().sum().transpose();
    for (Index b = 0; b < batch; ++b) {
        grads.pos += dh.middleRows(b * n, n);
    }
    return result;
}

template <typename Scalar>
VectorX<Scalar> encoder_features(const DenoiserParams<Scalar>& params, const MatrixX<Scalar>& input, int t,
                                 int enc_blocks) {
    if (enc_blocks < 1 || enc_blocks > params.config.depth) {
        throw std::invalid_argument("encoder_features: enc_blocks = " + std::to_string(enc_blocks) +
                                    " outside [1, " + std::to_string(params.config.depth) + "]");
    }
    const std::span<const MatrixX<Scalar>> inputs(&input, 1);
    const std::span<const int> ts(&t, 1);
    const Mat<Scalar> h = run_blocks<Scalar>(params, inputs, ts, enc_blocks, nullptr);
    return h.colwise().mean().transpose();
}

template <typename Scalar>
Index MergedEncoder<Scalar>::parameter_count() const {
    Index count = w_in.size() + b_in.size() + pos.size();
    for (const auto& b : blocks) {
        for (const auto* m : {&b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta, &b.wq, &b.bq, &b.wk, &b.bk,
                              &b.wv, &b.bv, &b.wo, &b.bo, &b.w1, &b.b1, &b.w2, &b.b2}) {
            count += m->size();
        }
    }
    return count;
}

template <typename Scalar>
MergedEncoder<Scalar> merge_encoder(const DenoiserParams<Scalar>& params, int t, int enc_blocks) {
    const DenoiserConfig& c = params.config;
    if (enc_blocks < 1 || enc_blocks > c.depth) {
        throw std::invalid_argument("merge_encoder: enc_blocks out of range");
    }
    MergedEncoder<Scalar> enc;
    enc.config = c;
    enc.t = t;
    enc.w_in = params.w_in;
    enc.b_in = params.b_in;
    enc.pos = params.pos;
    const VectorX<Scalar> emb = time_embedding<Scalar>(t, c.time_embed_dim);
    const Index w = c.width;
    for (int i = 0; i < enc_blocks; ++i) {
        const BlockParams<Scalar>& bp = params.blocks[static_cast<std::size_t>(i)];
        const VectorX<Scalar> hidden = silu(Mat<Scalar>(bp.c1 * emb + bp.cb1));
        const VectorX<Scalar> mod = bp.c2 * hidden + bp.cb2.col(0);
        MergedBlock<Scalar> mb;
        mb.ln1_beta = mod.segment(0, w);
        mb.ln1_gamma = (mod.segment(w, w).array() + Scalar(1)).matrix();
        mb.ln2_beta = mod.segment(2 * w, w);
        mb.ln2_gamma = (mod.segment(3 * w, w).array() + Scalar(1)).matrix();
        mb.wq = bp.wq;
        mb.bq = bp.bq;
        mb.wk = bp.wk;
        mb.bk = bp.bk;
        mb.wv = bp.wv;
        mb.bv = bp.bv;
        mb.wo = bp.wo;
        mb.bo = bp.bo;
        mb.w1 = bp.w1;
        mb.b1 = bp.b1;
        mb.w2 = bp.w2;
        mb.b2 = bp.b2;
        enc.blocks.push_back(std::move(mb));
    }
    return enc;
}

template <typename Scalar>
VectorX<Scalar> merged_features(const MergedEncoder<Scalar>& enc, const MatrixX<Scalar>& input) {
    using S = Scalar;
    const Index n = enc.config.tokens();
    if (input.rows() != n || input.cols() != enc.config.input_dim) {
        throw std::invalid_argument("merged_features: input shape mismatch");
    }
    auto affine_ln = [](const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta) {
        Mat<S> xhat;
        VectorX<S> inv;
        layer_norm(x, xhat, inv);
        return Mat<S>((xhat.array().rowwise() * gamma.col(0).array().transpose()).rowwise() +
                      beta.col(0).array().transpose());
    };
    Mat<S> h = linear(input, enc.w_in, enc.b_in) + enc.pos;
    for (const auto& b : enc.blocks) {
        const Mat<S> u = affine_ln(h, b.ln1_gamma, b.ln1_beta);
        const Mat<S> o =
            attention(linear(u, b.wq, b.bq), linear(u, b.wk, b.bk), linear(u, b.wv, b.bv), enc.config.heads, n,
                      static_cast<std::vector<Mat<S>>*>(nullptr));
        h += linear(o, b.wo, b.bo);
        const Mat<S> v = affine_ln(h, b.ln2_gamma, b.ln2_beta);
        h += linear(gelu(linear(v, b.w1, b.b1)), b.w2, b.b2);
    }
    return h.colwise().mean().transpose();
}

double learning_rate(const OptimizerConfig& cfg, long step, long steps_per_epoch) {
    const long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
    const long warm = static_cast<long>(cfg.warmup_epochs) * steps_per_epoch;
    const double peak = cfg.effective_lr();
    if (step < warm) {
        return peak * static_cast<double>(step) / static_cast<double>(warm);
    }
    if (total <= warm) {
        return peak;
    }
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const DenoiserConfig& config) {
    OptimizerState<Scalar> s;
    s.first_moment = DenoiserParams<Scalar>::zeros(config);
    s.second_moment = DenoiserParams<Scalar>::zeros(config);
    return s;
}

template <typename Scalar>
void adam_step(DenoiserParams<Scalar>& params, const DenoiserParams<Scalar>& grads, OptimizerState<Scalar>& state,
               const OptimizerConfig& cfg, double lr) {
    using S = Scalar;
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    double clip = 1.0;
    if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        visit_tensors(grads, [&](const std::string&, const MatrixX<S>& g) {
            sq += static_cast<double>(g.squaredNorm());
        });
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
            clip = cfg.grad_clip / norm;
        }
    }
    std::vector<MatrixX<S>*> ps, ms, vs;
    std::vector<const MatrixX<S>*> gs;
    visit_tensors(params, [&](const std::string&, MatrixX<S>& m) { ps.push_back(&m); });
    visit_tensors(state.first_moment, [&](const std::string&, MatrixX<S>& m) { ms.push_back(&m); });
    visit_tensors(state.second_moment, [&](const std::string&, MatrixX<S>& m) { vs.push_back(&m); });
    visit_tensors(grads, [&](const std::string&, const MatrixX<S>& m) { gs.push_back(&m); });
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    const S step_size = static_cast<S>(lr / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
    const S eps = static_cast<S>(cfg.eps);
    const S wd = static_cast<S>(lr * cfg.weight_decay);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto g = (gs[i]->array() * static_cast<S>(clip)).eval();
        ms[i]->array() = b1 * ms[i]->array() + (S(1) - b1) * g;
        vs[i]->array() = b2 * vs[i]->array() + (S(1) - b2) * g.square();
        if (wd != S(0)) {
            ps[i]->array() -= wd * ps[i]->array();
        }
        ps[i]->array() -= step_size * ms[i]->array() / (vs[i]->array().sqrt() * inv_bc2 + eps);
    }
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kEvalStream = 0x4556414cULL;

template <typename S>
std::vector<TrainingExample> draw_examples(const DenoisingTask& task, std::span<const MatrixX<double>> x0,
                                           std::span<const std::size_t> idx, std::uint64_t seed, std::uint64_t stream,
                                           std::vector<MatrixX<S>>& inputs, std::vector<int>& ts) {
    std::vector<TrainingExample> examples;
    examples.reserve(idx.size());
    inputs.clear();
    ts.clear();
    for (std::size_t i : idx) {
        Rng rng(derive_seed(seed, stream, i));
        const int t = rng.uniform_int(1, task.schedule.steps);
        examples.push_back(make_example(task, x0[i], t, rng));
        inputs.push_back(examples.back().input.template cast<S>());
        ts.push_back(t);
    }
    return examples;
}

} // namespace

template <typename Scalar>
double evaluation_loss(const DenoiserParams<Scalar>& params, const DenoisingTask& task,
                       std::span<const MatrixX<double>> x0_patches, int count, std::uint64_t seed) {
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(count, 0)), x0_patches.size());
    if (n == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, kEvalStream, i));
        const int t = rng.uniform_int(1, task.schedule.steps);
        const TrainingExample ex = make_example(task, x0_patches[i], t, rng);
        const MatrixX<double> pred = forward(params, MatrixX<Scalar>(ex.input.template cast<Scalar>()), t)
                                         .template cast<double>();
        total += example_loss(task, pred, ex);
    }
    return total / static_cast<double>(n);
}

template <typename Scalar>
TrainResult train(DenoiserParams<Scalar>& params, const DenoisingTask& task,
                  std::span<const MatrixX<double>> x0_patches, const TrainConfig& cfg) {
    task.validate();
    const OptimizerConfig& opt = cfg.optimizer;
    if (x0_patches.empty()) {
        throw std::invalid_argument("train: empty dataset");
    }
    if (opt.epochs < 1 || opt.batch_size < 1) {
        throw std::invalid_argument("train: epochs and batch size must be positive");
    }
    if (params.config.input_dim != task.input_dim() || params.config.output_dim != task.output_dim()) {
        throw std::invalid_argument("train: model dims (" + std::to_string(params.config.input_dim) + " -> " +
                                    std::to_string(params.config.output_dim) + ") do not match task (" +
                                    std::to_string(task.input_dim()) + " -> " + std::to_string(task.output_dim()) +
                                    ")");
    }
    if (params.config.steps != task.schedule.steps) {
        throw std::invalid_argument("train: model T differs from schedule T");
    }
    const std::size_t count = x0_patches.size();
    const auto bs = static_cast<std::size_t>(opt.batch_size);
    const long steps_per_epoch = static_cast<long>((count + bs - 1) / bs);

    TrainResult result;
    result.initial_loss = evaluation_loss(params, task, x0_patches, cfg.eval_examples, cfg.seed);
    OptimizerState<Scalar> state = make_optimizer_state<Scalar>(params.config);
    DenoiserParams<Scalar> grads;
    std::vector<std::size_t> order(count);
    std::vector<MatrixX<Scalar>> inputs;
    std::vector<int> ts;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = 0; i < count; ++i) {
            order[i] = i;
        }
        Rng shuffle(derive_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = count; i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<int>(i) - 1))]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < count; start += bs) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(bs, count - start));
            const auto examples = draw_examples<Scalar>(task, x0_patches, idx, cfg.seed,
                                                        static_cast<std::uint64_t>(epoch) + 1, inputs, ts);
            const LossGradFn loss = [&](std::size_t b, const MatrixX<double>& pred, MatrixX<double>& g) {
                return example_loss(task, pred, examples[b], &g);
            };
            BackwardResult br;
            try {
                br = backward<Scalar>(params, inputs, ts, loss, grads);
            } catch (const std::runtime_error& e) {
                throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                                          std::to_string(result.steps) + ")",
                                      result.steps);
            }
            adam_step(params, grads, state, opt, learning_rate(opt, result.steps, steps_per_epoch));
            ++result.steps;
            epoch_loss += br.loss * static_cast<double>(idx.size());
        }
        epoch_loss /= static_cast<double>(count);
        if (!std::isfinite(epoch_loss)) {
            throw DivergenceError("train: non-finite epoch loss at epoch " + std::to_string(epoch), result.steps);
        }
        result.epoch_loss.push_back(epoch_loss);
        if (cfg.on_epoch) {
            cfg.on_epoch(epoch, epoch_loss);
        }
    }
    result.final_loss = evaluation_loss(params, task, x0_patches, cfg.eval_examples, cfg.seed);
    return result;
}

template <typename Scalar>
std::vector<std::uint8_t> serialize_denoiser(const DenoiserParams<Scalar>& params) {
    const DenoiserConfig& c = params.config;
    BinaryWriter w;
    w.header(kDenoiserKindTag);
    for (const Index v : {c.input_dim, c.output_dim, c.patch_grid, c.width, static_cast<Index>(c.depth),
                          static_cast<Index>(c.heads), c.cond_hidden, c.time_embed_dim,
                          static_cast<Index>(c.steps)}) {
        w.u32(static_cast<std::uint32_t>(v));
    }
    std::uint32_t count = 0;
    visit_tensors(params, [&](const std::string&, const MatrixX<Scalar>&) { ++count; });
    w.u32(count);
    visit_tensors(params, [&](const std::string& name, const MatrixX<Scalar>& m) {
        w.string(name);
        w.matrix(m);
    });
    return w.bytes();
}

template <typename Scalar>
DenoiserParams<Scalar> deserialize_denoiser(std::span<const std::uint8_t> bytes, const std::string& name) {
    BinaryReader r(bytes, name);
    if (r.header() != kDenoiserKindTag) {
        r.fail("not a denoiser checkpoint");
    }
    DenoiserConfig c;
    c.input_dim = r.u32();
    c.output_dim = r.u32();
    c.patch_grid = r.u32();
    c.width = r.u32();
    c.depth = static_cast<int>(r.u32());
    c.heads = static_cast<int>(r.u32());
    c.cond_hidden = r.u32();
    c.time_embed_dim = r.u32();
    c.steps = static_cast<int>(r.u32());
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        r.fail(e.what());
    }
    DenoiserParams<Scalar> p = DenoiserParams<Scalar>::zeros(c);
    std::uint32_t expected = 0;
    visit_tensors(p, [&](const std::string&, const MatrixX<Scalar>&) { ++expected; });
    if (r.u32() != expected) {
        r.fail("tensor count mismatch");
    }
    visit_tensors(p, [&](const std::string& tensor, MatrixX<Scalar>& m) {
        const std::string got = r.string();
        if (got != tensor) {
            r.fail("expected tensor '" + tensor + "', found '" + got + "'");
        }
        const MatrixX<double> data = r.matrix();
        if (data.rows() != m.rows() || data.cols() != m.cols()) {
            r.fail("tensor '" + tensor + "' has the wrong shape");
        }
        m = data.template cast<Scalar>();
    });
    if (!r.at_end()) {
        r.fail("trailing bytes");
    }
    return p;
}

template <typename Scalar>
void save_denoiser(const DenoiserParams<Scalar>& params, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_denoiser(params));
}

template <typename Scalar>
DenoiserParams<Scalar> load_denoiser(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return deserialize_denoiser<Scalar>(bytes, path.string());
}

template <typename Scalar>
std::uint64_t params_checksum(const DenoiserParams<Scalar>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    visit_tensors(params, [&](const std::string&, const MatrixX<Scalar>& m) {
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(m.data());
        for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(Scalar); ++i) {
            h = (h ^ bytes[i]) * 0x100000001b3ULL;
        }
    });
    return h;
}

#define LDAE_INSTANTIATE(S)                                                                                          \
    template struct DenoiserParams<S>;                                                                               \
    template struct MergedEncoder<S>;                                                                                \
    template DenoiserParams<S> init_params<S>(const DenoiserConfig&, std::uint64_t);                                 \
    template VectorX<S> time_embedding<S>(int, Index);                                                               \
    template MatrixX<S> forward<S>(const DenoiserParams<S>&, const MatrixX<S>&, int);                                \
    template BackwardResult backward<S>(const DenoiserParams<S>&, std::span<const MatrixX<S>>, std::span<const int>, \
                                        const LossGradFn&, DenoiserParams<S>&);                                      \
    template VectorX<S> encoder_features<S>(const DenoiserParams<S>&, const MatrixX<S>&, int, int);                  \
    template MergedEncoder<S> merge_encoder<S>(const DenoiserParams<S>&, int, int);                                  \
    template VectorX<S> merged_features<S>(const MergedEncoder<S>&, const MatrixX<S>&);                              \
    template OptimizerState<S> make_optimizer_state<S>(const DenoiserConfig&);                                       \
    template void adam_step<S>(DenoiserParams<S>&, const DenoiserParams<S>&, OptimizerState<S>&,                     \
                               const OptimizerConfig&, double);                                                      \
    template TrainResult train<S>(DenoiserParams<S>&, const DenoisingTask&, std::span<const MatrixX<double>>,        \
                                  const TrainConfig&);                                                               \
    template double evaluation_loss<S>(const DenoiserParams<S>&, const DenoisingTask&,                               \
                                       std::span<const MatrixX<double>>, int, std::uint64_t);                        \
    template std::vector<std::uint8_t> serialize_denoiser<S>(const DenoiserParams<S>&);                              \
    template DenoiserParams<S> deserialize_denoiser<S>(std::span<const std::uint8_t>, const std::string&);           \
    template void save_denoiser<S>(const DenoiserParams<S>&, const std::filesystem::path&);                          \
    template DenoiserParams<S> load_denoiser<S>(const std::filesystem::path&);                                       \
    template std::uint64_t params_checksum<S>(const DenoiserParams<S>&);

LDAE_INSTANTIATE(float)
LDAE_INSTANTIATE(double)

#undef LDAE_INSTANTIATE

} // namespace ldae
