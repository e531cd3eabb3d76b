#ifndef ICFLOW_MODEL_HPP
#define ICFLOW_MODEL_HPP

#include "icflow/core.hpp"
#include "icflow/nn.hpp"
#include "icflow/rope.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace icflow {

struct ModelConfig {
    int latent_channels = 48;
    int model_dim = 128;
    int num_heads = 4;
    int depth_double = 2;
    int depth_single = 4;
    int instruction_vocab = 48;
    double mlp_ratio = 4.0;
    int patch = 4;
    int time_embed_dim = 256;
    std::array<int, 3> rope_axis_split{0, 0, 0};  // zeros = default split
    double rope_base = 10000.0;

    int head_dim() const { return model_dim / num_heads; }
    int mlp_hidden() const {
        return static_cast<int>(model_dim * mlp_ratio + 0.5);
    }

    RopeConfig rope_config() const {
        if (rope_axis_split[0] == 0)
            return RopeConfig::default_for(head_dim());
        RopeConfig cfg;
        cfg.head_dim = head_dim();
        cfg.axis_split = rope_axis_split;
        cfg.base_freq = rope_base;
        cfg.validate();
        return cfg;
    }

    void validate() const {
        if (model_dim < 1 || num_heads < 1 || model_dim % num_heads != 0)
            throw Error("ModelConfig: model_dim must be divisible by num_heads");
        if (latent_channels < 1 || instruction_vocab < 1)
            throw Error("ModelConfig: channels and vocab must be >= 1");
        if (depth_double < 0 || depth_single < 0)
            throw Error("ModelConfig: depths must be >= 0");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw Error("ModelConfig: time_embed_dim must be even and >= 2");
        rope_config();  // validates the split
    }

    bool operator==(const ModelConfig& o) const {
        return latent_channels == o.latent_channels &&
               model_dim == o.model_dim && num_heads == o.num_heads &&
               depth_double == o.depth_double &&
               depth_single == o.depth_single &&
               instruction_vocab == o.instruction_vocab &&
               mlp_ratio == o.mlp_ratio && patch == o.patch &&
               time_embed_dim == o.time_embed_dim &&
               rope_axis_split == o.rope_axis_split && rope_base == o.rope_base;
    }
};

// Sinusoidal embedding of the flow time, [cos | sin] halves.
template <typename T>
Row<T> timestep_embedding(double t, int dim) {
    const int half = dim / 2;
    Row<T> out(dim);
    const double scaled = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        out(i) = static_cast<T>(std::cos(scaled * freq));
        out(half + i) = static_cast<T>(std::sin(scaled * freq));
    }
    return out;
}

// Separate image/text weights; attention mixes the concatenated streams.
template <typename T>
struct DoubleBlock {
    Linear<T> img_mod, txt_mod;  // cond -> 6 modulation rows per stream
    Linear<T> img_qkv, txt_qkv;
    RMSNorm<T> img_qnorm, img_knorm, txt_qnorm, txt_knorm;
    Linear<T> img_proj, txt_proj;
    Linear<T> img_mlp0, img_mlp1, txt_mlp0, txt_mlp1;
};

// Fused block: one input linear emits [q|k|v|mlp_in], one output linear
// consumes [attn_out|mlp_activated]; a single (shift, scale, gate) triple
// modulates the whole block.
template <typename T>
struct SingleBlock {
    Linear<T> mod;  // cond -> 3 modulation rows
    Linear<T> lin1;
    RMSNorm<T> qnorm, knorm;
    Linear<T> lin2;

    Eigen::Index modulation_dim() const { return mod.w.rows(); }
};

template <typename T>
struct ModelParams {
    Linear<T> img_in;
    Embedding<T> txt_emb;
    Linear<T> time_in0, time_in1;
    Linear<T> vec_in0, vec_in1;
    std::vector<DoubleBlock<T>> dbl;
    std::vector<SingleBlock<T>> sgl;
    Linear<T> final_mod;  // cond -> (shift, scale)
    Linear<T> out_proj;
};

namespace detail {

template <typename T, typename F>
void visit_double_block(DoubleBlock<T>& b, const std::string& prefix, F&& f) {
    auto lin = [&](const char* name, Linear<T>& l) {
        f(prefix + name + ".weight", l.w);
        f(prefix + name + ".bias", l.b);
    };
    lin("img_mod", b.img_mod);
    lin("txt_mod", b.txt_mod);
    lin("img_qkv", b.img_qkv);
    lin("txt_qkv", b.txt_qkv);
    f(prefix + "img_qnorm.scale", b.img_qnorm.scale);
    f(prefix + "img_knorm.scale", b.img_knorm.scale);
    f(prefix + "txt_qnorm.scale", b.txt_qnorm.scale);
    f(prefix + "txt_knorm.scale", b.txt_knorm.scale);
    lin("img_proj", b.img_proj);
    lin("txt_proj", b.txt_proj);
    lin("img_mlp0", b.img_mlp0);
    lin("img_mlp1", b.img_mlp1);
    lin("txt_mlp0", b.txt_mlp0);
    lin("txt_mlp1", b.txt_mlp1);
}

template <typename T, typename F>
void visit_single_block(SingleBlock<T>& b, const std::string& prefix, F&& f) {
    f(prefix + "mod.weight", b.mod.w);
    f(prefix + "mod.bias", b.mod.b);
    f(prefix + "lin1.weight", b.lin1.w);
    f(prefix + "lin1.bias", b.lin1.b);
    f(prefix + "qnorm.scale", b.qnorm.scale);
    f(prefix + "knorm.scale", b.knorm.scale);
    f(prefix + "lin2.weight", b.lin2.w);
    f(prefix + "lin2.bias", b.lin2.b);
}

}  // namespace detail

// Visits every parameter tensor as (name, matrix-like). Visitation order is
// fixed; optimizers, serialization and gradient checks all rely on it.
template <typename T, typename F>
void visit_params(ModelParams<T>& p, F&& f) {
    auto lin = [&](const char* name, Linear<T>& l) {
        f(std::string(name) + ".weight", l.w);
        f(std::string(name) + ".bias", l.b);
    };
    lin("img_in", p.img_in);
    f(std::string("txt_emb.table"), p.txt_emb.table);
    lin("time_in0", p.time_in0);
    lin("time_in1", p.time_in1);
    lin("vec_in0", p.vec_in0);
    lin("vec_in1", p.vec_in1);
    for (size_t i = 0; i < p.dbl.size(); ++i)
        detail::visit_double_block(p.dbl[i],
                                   "dbl." + std::to_string(i) + ".", f);
    for (size_t i = 0; i < p.sgl.size(); ++i)
        detail::visit_single_block(p.sgl[i],
                                   "sgl." + std::to_string(i) + ".", f);
    lin("final_mod", p.final_mod);
    lin("out_proj", p.out_proj);
}

template <typename T>
struct TensorRef {
    std::string name;
    T* data;
    Eigen::Index rows;
    Eigen::Index cols;
    Eigen::Index size() const { return rows * cols; }
};

template <typename T>
std::vector<TensorRef<T>> collect_tensors(ModelParams<T>& p) {
    std::vector<TensorRef<T>> refs;
    visit_params(p, [&](const std::string& name, auto& m) {
        refs.push_back({name, m.data(), m.rows(), m.cols()});
    });
    return refs;
}

template <typename T>
int64_t param_count(ModelParams<T>& p) {
    int64_t n = 0;
    visit_params(p, [&](const std::string&, auto& m) { n += m.size(); });
    return n;
}

template <typename T>
void zero_params(ModelParams<T>& p) {
    visit_params(p, [](const std::string&, auto& m) { m.setZero(); });
}

// FNV-1a over raw tensor bytes, in visitation order.
template <typename T>
uint64_t param_checksum(ModelParams<T>& p) {
    uint64_t h = 1469598103934665603ull;
    visit_params(p, [&](const std::string&, auto& m) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
        size_t n = static_cast<size_t>(m.size()) * sizeof(T);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    });
    return h;
}

namespace detail {

template <typename T>
void init_double_block(DoubleBlock<T>& b, const ModelConfig& cfg, Rng& rng,
                       double stddev) {
    const int d = cfg.model_dim;
    const int hidden = cfg.mlp_hidden();
    b.img_mod.init_zero(6 * d, d);
    b.txt_mod.init_zero(6 * d, d);
    b.img_qkv.init(3 * d, d, rng, stddev);
    b.txt_qkv.init(3 * d, d, rng, stddev);
    b.img_qnorm.init(cfg.head_dim());
    b.img_knorm.init(cfg.head_dim());
    b.txt_qnorm.init(cfg.head_dim());
    b.txt_knorm.init(cfg.head_dim());
    b.img_proj.init(d, d, rng, stddev);
    b.txt_proj.init(d, d, rng, stddev);
    b.img_mlp0.init(hidden, d, rng, stddev);
    b.img_mlp1.init(d, hidden, rng, stddev);
    b.txt_mlp0.init(hidden, d, rng, stddev);
    b.txt_mlp1.init(d, hidden, rng, stddev);
}

template <typename T>
void init_single_block(SingleBlock<T>& b, const ModelConfig& cfg, Rng& rng,
                       double stddev) {
    const int d = cfg.model_dim;
    const int hidden = cfg.mlp_hidden();
    b.mod.init_zero(3 * d, d);
    b.lin1.init(3 * d + hidden, d, rng, stddev);
    b.qnorm.init(cfg.head_dim());
    b.knorm.init(cfg.head_dim());
    b.lin2.init(d, d + hidden, rng, stddev);
}

}  // namespace detail

// Training initialization: modulation projections and the final output
// layer start at zero, so every block is the identity and the model output
// is exactly zero.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng,
                           double stddev = 0.02) {
    cfg.validate();
    ModelParams<T> p;
    const int d = cfg.model_dim;
    p.img_in.init(d, cfg.latent_channels, rng, stddev);
    p.txt_emb.init(cfg.instruction_vocab, d, rng, stddev);
    p.time_in0.init(d, cfg.time_embed_dim, rng, stddev);
    p.time_in1.init(d, d, rng, stddev);
    p.vec_in0.init(d, d, rng, stddev);
    p.vec_in1.init(d, d, rng, stddev);
    p.dbl.resize(static_cast<size_t>(cfg.depth_double));
    for (auto& b : p.dbl)
        detail::init_double_block(b, cfg, rng, stddev);
    p.sgl.resize(static_cast<size_t>(cfg.depth_single));
    for (auto& b : p.sgl)
        detail::init_single_block(b, cfg, rng, stddev);
    p.final_mod.init_zero(2 * d, d);
    p.out_proj.init_zero(cfg.latent_channels, d);
    return p;
}

// Same-shape zero parameters, used as gradient accumulators.
template <typename T>
ModelParams<T> make_grads(const ModelConfig& cfg) {
    Rng rng(0);
    ModelParams<T> g = init_params<T>(cfg, rng);
    zero_params(g);
    return g;
}

// Every tensor randomized (modulations included) so gradients flow through
// all paths; used by the finite-difference checks.
template <typename T>
ModelParams<T> randomize_params(const ModelConfig& cfg, Rng& rng,
                                double stddev = 0.1) {
    ModelParams<T> p = init_params<T>(cfg, rng, stddev);
    visit_params(p, [&](const std::string& name, auto& m) {
        rng.fill_normal(m, stddev);
        if (name.find("norm.scale") != std::string::npos)
            m.array() += T(1);
    });
    return p;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

// Per-head RMS norm followed by rotary rotation, in place.
template <typename T>
void qk_transform(Mat<T>& x, int heads, const RMSNorm<T>& norm,
                  const Mat<T>& cos_tab, const Mat<T>& sin_tab,
                  std::vector<typename RMSNorm<T>::Cache>* caches) {
    const Eigen::Index hd = x.cols() / heads;
    if (caches)
        caches->resize(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Mat<T> blk = x.middleCols(h * hd, hd);
        Mat<T> normed =
            norm.forward(blk, caches ? &(*caches)[static_cast<size_t>(h)]
                                     : nullptr);
        x.middleCols(h * hd, hd) = rope_apply(normed, cos_tab, sin_tab);
    }
}

template <typename T>
Mat<T> qk_transform_backward(const Mat<T>& dx_post, int heads,
                             const RMSNorm<T>& norm,
                             const std::vector<typename RMSNorm<T>::Cache>& caches,
                             const Mat<T>& cos_tab, const Mat<T>& sin_tab,
                             RMSNorm<T>& norm_grad) {
    const Eigen::Index hd = dx_post.cols() / heads;
    Mat<T> dx(dx_post.rows(), dx_post.cols());
    for (int h = 0; h < heads; ++h) {
        Mat<T> drot = dx_post.middleCols(h * hd, hd);
        Mat<T> dnormed = rope_apply(drot, cos_tab, sin_tab, -1);
        dx.middleCols(h * hd, hd) =
            norm.backward(caches[static_cast<size_t>(h)], dnormed, norm_grad);
    }
    return dx;
}

// shift/scale/gate rows live in one modulation output row; chunk i is
// mod.segment(i * d, d).
template <typename T>
Mat<T> modulate(const Mat<T>& ln_y, const Row<T>& mod, int chunk, int d) {
    Mat<T> out = ln_y;
    out.array().rowwise() *=
        (mod.segment((chunk + 1) * d, d).array() + T(1));  // scale
    out.array().rowwise() += mod.segment(chunk * d, d).array();  // shift
    return out;
}

// Accumulates shift/scale grads into dmod, returns d(ln_y).
template <typename T>
Mat<T> modulate_backward(const Mat<T>& ln_y, const Row<T>& mod,
                         const Mat<T>& dout, int chunk, int d, Row<T>& dmod) {
    dmod.segment(chunk * d, d) += dout.colwise().sum();
    dmod.segment((chunk + 1) * d, d) +=
        (dout.array() * ln_y.array()).colwise().sum().matrix();
    Mat<T> dln = dout;
    dln.array().rowwise() *= (mod.segment((chunk + 1) * d, d).array() + T(1));
    return dln;
}

}  // namespace detail

template <typename T>
struct DoubleBlockCache {
    Mat<T> img_in, txt_in;
    Row<T> img_mod_row, txt_mod_row;
    LayerNormCache<T> img_ln_a, txt_ln_a, img_ln_m, txt_ln_m;
    Mat<T> img_moded_a, txt_moded_a;  // qkv inputs
    Mat<T> q_cat, k_cat, v_cat;       // post norm+rope
    std::vector<typename RMSNorm<T>::Cache> img_qc, img_kc, txt_qc, txt_kc;
    AttentionCache<T> attn;
    Mat<T> img_att, txt_att;          // proj inputs
    Mat<T> img_proj_out, txt_proj_out;
    Mat<T> img_moded_m, txt_moded_m;  // mlp0 inputs
    Mat<T> img_h, txt_h;              // pre-activation hidden
    Mat<T> img_act, txt_act;          // mlp1 inputs
    Mat<T> img_mlp_out, txt_mlp_out;
};

template <typename T>
struct SingleBlockCache {
    Mat<T> x_in;
    Row<T> mod_row;
    LayerNormCache<T> ln;
    Mat<T> moded;  // lin1 input
    Mat<T> q, k, v;
    std::vector<typename RMSNorm<T>::Cache> qc, kc;
    AttentionCache<T> attn;
    Mat<T> h_mlp;     // pre-activation hidden
    Mat<T> cat;       // lin2 input [attn|act]
    Mat<T> lin2_out;  // pre-gate
};

template <typename T>
struct ForwardCache {
    // inputs
    Mat<T> image_tokens;
    std::vector<int> text_tokens;
    Eigen::Index target_len = 0;
    double t = 0.0;
    // rope tables for the [txt|img] concatenation
    Mat<T> cos_tab, sin_tab;
    // conditioning
    Row<T> temb, time_h, pooled, vec_h, cond, sc;
    // streams
    Mat<T> img_embedded;
    std::vector<DoubleBlockCache<T>> dbl;
    std::vector<SingleBlockCache<T>> sgl;
    // final layer
    Mat<T> tgt_in;
    Row<T> final_mod_row;
    LayerNormCache<T> final_ln;
    Mat<T> final_moded;
};

namespace detail {

template <typename T>
void double_block_forward(const DoubleBlock<T>& b, const ModelConfig& cfg,
                          Mat<T>& txt, Mat<T>& img, const Row<T>& sc,
                          const Mat<T>& cos_tab, const Mat<T>& sin_tab,
                          DoubleBlockCache<T>& c) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const Eigen::Index lt = txt.rows();
    const Eigen::Index li = img.rows();
    const bool has_txt = lt > 0;
    c.txt_in = txt;
    c.img_in = img;
    Mat<T> sc_m = sc;
    c.img_mod_row = b.img_mod.forward(sc_m).row(0);
    if (has_txt)
        c.txt_mod_row = b.txt_mod.forward(sc_m).row(0);

    // attention halves
    c.img_moded_a = modulate(layer_norm(img, &c.img_ln_a), c.img_mod_row, 0, d);
    Mat<T> img_qkv = b.img_qkv.forward(c.img_moded_a);
    c.q_cat.resize(lt + li, d);
    c.k_cat.resize(lt + li, d);
    c.v_cat.resize(lt + li, d);
    if (has_txt) {
        c.txt_moded_a =
            modulate(layer_norm(txt, &c.txt_ln_a), c.txt_mod_row, 0, d);
        Mat<T> txt_qkv = b.txt_qkv.forward(c.txt_moded_a);
        c.q_cat.topRows(lt) = txt_qkv.leftCols(d);
        c.k_cat.topRows(lt) = txt_qkv.middleCols(d, d);
        c.v_cat.topRows(lt) = txt_qkv.rightCols(d);
    }
    c.q_cat.bottomRows(li) = img_qkv.leftCols(d);
    c.k_cat.bottomRows(li) = img_qkv.middleCols(d, d);
    c.v_cat.bottomRows(li) = img_qkv.rightCols(d);

    // per-stream qk-norm, shared rope tables over the concatenation
    if (has_txt) {
        Mat<T> cos_txt = cos_tab.topRows(lt), sin_txt = sin_tab.topRows(lt);
        Mat<T> qt = c.q_cat.topRows(lt), kt = c.k_cat.topRows(lt);
        qk_transform(qt, heads, b.txt_qnorm, cos_txt, sin_txt, &c.txt_qc);
        qk_transform(kt, heads, b.txt_knorm, cos_txt, sin_txt, &c.txt_kc);
        c.q_cat.topRows(lt) = qt;
        c.k_cat.topRows(lt) = kt;
    }
    {
        Mat<T> cos_img = cos_tab.bottomRows(li),
               sin_img = sin_tab.bottomRows(li);
        Mat<T> qi = c.q_cat.bottomRows(li), ki = c.k_cat.bottomRows(li);
        qk_transform(qi, heads, b.img_qnorm, cos_img, sin_img, &c.img_qc);
        qk_transform(ki, heads, b.img_knorm, cos_img, sin_img, &c.img_kc);
        c.q_cat.bottomRows(li) = qi;
        c.k_cat.bottomRows(li) = ki;
    }

    Mat<T> att = attention_forward(c.q_cat, c.k_cat, c.v_cat, heads, &c.attn);
    c.img_att = att.bottomRows(li);
    c.img_proj_out = b.img_proj.forward(c.img_att);
    img += (c.img_proj_out.array().rowwise() *
            c.img_mod_row.segment(2 * d, d).array())
               .matrix();
    if (has_txt) {
        c.txt_att = att.topRows(lt);
        c.txt_proj_out = b.txt_proj.forward(c.txt_att);
        txt += (c.txt_proj_out.array().rowwise() *
                c.txt_mod_row.segment(2 * d, d).array())
                   .matrix();
    }

    // mlp halves
    c.img_moded_m = modulate(layer_norm(img, &c.img_ln_m), c.img_mod_row, 3, d);
    c.img_h = b.img_mlp0.forward(c.img_moded_m);
    c.img_act = gelu(c.img_h);
    c.img_mlp_out = b.img_mlp1.forward(c.img_act);
    img += (c.img_mlp_out.array().rowwise() *
            c.img_mod_row.segment(5 * d, d).array())
               .matrix();
    if (has_txt) {
        c.txt_moded_m =
            modulate(layer_norm(txt, &c.txt_ln_m), c.txt_mod_row, 3, d);
        c.txt_h = b.txt_mlp0.forward(c.txt_moded_m);
        c.txt_act = gelu(c.txt_h);
        c.txt_mlp_out = b.txt_mlp1.forward(c.txt_act);
        txt += (c.txt_mlp_out.array().rowwise() *
                c.txt_mod_row.segment(5 * d, d).array())
                   .matrix();
    }
}

template <typename T>
void double_block_backward(const DoubleBlock<T>& b, const ModelConfig& cfg,
                           const DoubleBlockCache<T>& c, Mat<T>& dtxt,
                           Mat<T>& dimg, const Row<T>& sc, const Mat<T>& cos_tab,
                           const Mat<T>& sin_tab, DoubleBlock<T>& g,
                           Row<T>& d_sc) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const Eigen::Index lt = c.txt_in.rows();
    const Eigen::Index li = c.img_in.rows();
    const bool has_txt = lt > 0;
    Row<T> dmod_img = Row<T>::Zero(6 * d);
    Row<T> dmod_txt = Row<T>::Zero(6 * d);

    // mlp halves (reverse order)
    {
        Mat<T> dmlp_out = dimg;
        dmlp_out.array().rowwise() *= c.img_mod_row.segment(5 * d, d).array();
        dmod_img.segment(5 * d, d) +=
            (dimg.array() * c.img_mlp_out.array()).colwise().sum().matrix();
        Mat<T> dact = b.img_mlp1.backward(c.img_act, dmlp_out, g.img_mlp1);
        Mat<T> dh = gelu_backward(c.img_h, dact);
        Mat<T> dmoded = b.img_mlp0.backward(c.img_moded_m, dh, g.img_mlp0);
        Mat<T> dln =
            modulate_backward(c.img_ln_m.y, c.img_mod_row, dmoded, 3, d,
                              dmod_img);
        dimg += layer_norm_backward(c.img_ln_m, dln);
    }
    if (has_txt) {
        Mat<T> dmlp_out = dtxt;
        dmlp_out.array().rowwise() *= c.txt_mod_row.segment(5 * d, d).array();
        dmod_txt.segment(5 * d, d) +=
            (dtxt.array() * c.txt_mlp_out.array()).colwise().sum().matrix();
        Mat<T> dact = b.txt_mlp1.backward(c.txt_act, dmlp_out, g.txt_mlp1);
        Mat<T> dh = gelu_backward(c.txt_h, dact);
        Mat<T> dmoded = b.txt_mlp0.backward(c.txt_moded_m, dh, g.txt_mlp0);
        Mat<T> dln =
            modulate_backward(c.txt_ln_m.y, c.txt_mod_row, dmoded, 3, d,
                              dmod_txt);
        dtxt += layer_norm_backward(c.txt_ln_m, dln);
    }

    // attention halves
    Mat<T> datt = Mat<T>::Zero(lt + li, d);
    {
        Mat<T> dproj_out = dimg;
        dproj_out.array().rowwise() *= c.img_mod_row.segment(2 * d, d).array();
        dmod_img.segment(2 * d, d) +=
            (dimg.array() * c.img_proj_out.array()).colwise().sum().matrix();
        datt.bottomRows(li) =
            b.img_proj.backward(c.img_att, dproj_out, g.img_proj);
    }
    if (has_txt) {
        Mat<T> dproj_out = dtxt;
        dproj_out.array().rowwise() *= c.txt_mod_row.segment(2 * d, d).array();
        dmod_txt.segment(2 * d, d) +=
            (dtxt.array() * c.txt_proj_out.array()).colwise().sum().matrix();
        datt.topRows(lt) = b.txt_proj.backward(c.txt_att, dproj_out, g.txt_proj);
    }

    Mat<T> dq, dk, dv;
    attention_backward(c.q_cat, c.k_cat, c.v_cat, c.attn, datt, heads, dq, dk,
                       dv);

    // undo rope + qk-norm per stream
    Mat<T> cos_img = cos_tab.bottomRows(li), sin_img = sin_tab.bottomRows(li);
    Mat<T> dimg_qkv(li, 3 * d);
    dimg_qkv.leftCols(d) = qk_transform_backward(
        Mat<T>(dq.bottomRows(li)), heads, b.img_qnorm, c.img_qc, cos_img,
        sin_img, g.img_qnorm);
    dimg_qkv.middleCols(d, d) = qk_transform_backward(
        Mat<T>(dk.bottomRows(li)), heads, b.img_knorm, c.img_kc, cos_img,
        sin_img, g.img_knorm);
    dimg_qkv.rightCols(d) = dv.bottomRows(li);
    {
        Mat<T> dmoded =
            b.img_qkv.backward(c.img_moded_a, dimg_qkv, g.img_qkv);
        Mat<T> dln = modulate_backward(c.img_ln_a.y, c.img_mod_row, dmoded, 0,
                                       d, dmod_img);
        dimg += layer_norm_backward(c.img_ln_a, dln);
    }
    if (has_txt) {
        Mat<T> cos_txt = cos_tab.topRows(lt), sin_txt = sin_tab.topRows(lt);
        Mat<T> dtxt_qkv(lt, 3 * d);
        dtxt_qkv.leftCols(d) = qk_transform_backward(
            Mat<T>(dq.topRows(lt)), heads, b.txt_qnorm, c.txt_qc, cos_txt,
            sin_txt, g.txt_qnorm);
        dtxt_qkv.middleCols(d, d) = qk_transform_backward(
            Mat<T>(dk.topRows(lt)), heads, b.txt_knorm, c.txt_kc, cos_txt,
            sin_txt, g.txt_knorm);
        dtxt_qkv.rightCols(d) = dv.topRows(lt);
        Mat<T> dmoded = b.txt_qkv.backward(c.txt_moded_a, dtxt_qkv, g.txt_qkv);
        Mat<T> dln = modulate_backward(c.txt_ln_a.y, c.txt_mod_row, dmoded, 0,
                                       d, dmod_txt);
        dtxt += layer_norm_backward(c.txt_ln_a, dln);
    }

    // modulation projections
    Mat<T> sc_m = sc;
    Mat<T> dmod_img_m = dmod_img;
    d_sc += b.img_mod.backward(sc_m, dmod_img_m, g.img_mod).row(0);
    if (has_txt) {
        Mat<T> dmod_txt_m = dmod_txt;
        d_sc += b.txt_mod.backward(sc_m, dmod_txt_m, g.txt_mod).row(0);
    }
}

template <typename T>
void single_block_forward(const SingleBlock<T>& b, const ModelConfig& cfg,
                          Mat<T>& x, const Row<T>& sc, const Mat<T>& cos_tab,
                          const Mat<T>& sin_tab, SingleBlockCache<T>& c) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int hidden = cfg.mlp_hidden();
    c.x_in = x;
    Mat<T> sc_m = sc;
    c.mod_row = b.mod.forward(sc_m).row(0);
    c.moded = modulate(layer_norm(x, &c.ln), c.mod_row, 0, d);
    Mat<T> h = b.lin1.forward(c.moded);
    c.q = h.leftCols(d);
    c.k = h.middleCols(d, d);
    c.v = h.middleCols(2 * d, d);
    c.h_mlp = h.rightCols(hidden);
    qk_transform(c.q, heads, b.qnorm, cos_tab, sin_tab, &c.qc);
    qk_transform(c.k, heads, b.knorm, cos_tab, sin_tab, &c.kc);
    Mat<T> att = attention_forward(c.q, c.k, c.v, heads, &c.attn);
    c.cat.resize(x.rows(), d + hidden);
    c.cat.leftCols(d) = att;
    c.cat.rightCols(hidden) = gelu(c.h_mlp);
    c.lin2_out = b.lin2.forward(c.cat);
    x += (c.lin2_out.array().rowwise() *
          c.mod_row.segment(2 * d, d).array())
             .matrix();
}

template <typename T>
void single_block_backward(const SingleBlock<T>& b, const ModelConfig& cfg,
                           const SingleBlockCache<T>& c, Mat<T>& dx,
                           const Row<T>& sc, const Mat<T>& cos_tab,
                           const Mat<T>& sin_tab, SingleBlock<T>& g,
                           Row<T>& d_sc) {
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int hidden = cfg.mlp_hidden();
    Row<T> dmod = Row<T>::Zero(3 * d);

    Mat<T> dlin2_out = dx;
    dlin2_out.array().rowwise() *= c.mod_row.segment(2 * d, d).array();
    dmod.segment(2 * d, d) +=
        (dx.array() * c.lin2_out.array()).colwise().sum().matrix();
    Mat<T> dcat = b.lin2.backward(c.cat, dlin2_out, g.lin2);

    Mat<T> datt = dcat.leftCols(d);
    Mat<T> dq, dk, dv;
    attention_backward(c.q, c.k, c.v, c.attn, datt, heads, dq, dk, dv);

    Mat<T> dh(dx.rows(), 3 * d + hidden);
    dh.leftCols(d) = qk_transform_backward(dq, heads, b.qnorm, c.qc, cos_tab,
                                           sin_tab, g.qnorm);
    dh.middleCols(d, d) = qk_transform_backward(dk, heads, b.knorm, c.kc,
                                                cos_tab, sin_tab, g.knorm);
    dh.middleCols(2 * d, d) = dv;
    dh.rightCols(hidden) = gelu_backward(c.h_mlp, Mat<T>(dcat.rightCols(hidden)));

    Mat<T> dmoded = b.lin1.backward(c.moded, dh, g.lin1);
    Mat<T> dln = modulate_backward(c.ln.y, c.mod_row, dmoded, 0, d, dmod);
    dx += layer_norm_backward(c.ln, dln);

    Mat<T> sc_m = sc;
    Mat<T> dmod_m = dmod;
    d_sc += b.mod.backward(sc_m, dmod_m, g.mod).row(0);
}

}  // namespace detail

// Velocity network. Returns one velocity row per target image token;
// context-token and text-token outputs are discarded. Text tokens carry no
// spatial position (rotary identity).
template <typename T>
Mat<T> forward(const ModelParams<T>& p, const ModelConfig& cfg,
               const Mat<T>& image_tokens, const std::vector<int>& text_tokens,
               const std::vector<PositionTriplet>& positions,
               Eigen::Index target_len, double t,
               ForwardCache<T>* cache = nullptr) {
    if (static_cast<size_t>(image_tokens.rows()) != positions.size())
        throw Error("forward: " + std::to_string(image_tokens.rows()) +
                    " image tokens vs " + std::to_string(positions.size()) +
                    " positions");
    if (image_tokens.cols() != cfg.latent_channels)
        throw Error("forward: image token dim " +
                    std::to_string(image_tokens.cols()) + " != latent_channels " +
                    std::to_string(cfg.latent_channels));
    if (target_len < 0 || target_len > image_tokens.rows())
        throw Error("forward: bad target_len");

    const int d = cfg.model_dim;
    const Eigen::Index lt = static_cast<Eigen::Index>(text_tokens.size());
    const Eigen::Index li = image_tokens.rows();
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c.image_tokens = image_tokens;
    c.text_tokens = text_tokens;
    c.target_len = target_len;
    c.t = t;

    // rope tables over [txt | img]; text rows rotate by zero angles
    {
        std::vector<PositionTriplet> full(static_cast<size_t>(lt),
                                          PositionTriplet{0, 0, 0});
        full.insert(full.end(), positions.begin(), positions.end());
        Matd angles = rope_angles(full, cfg.rope_config());
        c.cos_tab = angles.array().cos().template cast<T>();
        c.sin_tab = angles.array().sin().template cast<T>();
    }

    // conditioning: timestep embedding + pooled instruction embedding
    c.temb = timestep_embedding<T>(t, cfg.time_embed_dim);
    Mat<T> temb_m = c.temb;
    c.time_h = p.time_in0.forward(temb_m).row(0);
    Mat<T> time_act = silu(Mat<T>(c.time_h));
    Row<T> cond_t = p.time_in1.forward(time_act).row(0);

    Mat<T> txt = p.txt_emb.forward(text_tokens);
    if (lt > 0)
        c.pooled = txt.colwise().mean();
    else
        c.pooled = Row<T>::Zero(d);
    Mat<T> pooled_m = c.pooled;
    c.vec_h = p.vec_in0.forward(pooled_m).row(0);
    Mat<T> vec_act = silu(Mat<T>(c.vec_h));
    Row<T> cond_v = p.vec_in1.forward(vec_act).row(0);

    c.cond = cond_t + cond_v;
    c.sc = silu(Mat<T>(c.cond)).row(0);

    // streams
    c.img_embedded = p.img_in.forward(image_tokens);
    Mat<T> img = c.img_embedded;
    c.dbl.resize(p.dbl.size());
    for (size_t i = 0; i < p.dbl.size(); ++i)
        detail::double_block_forward(p.dbl[i], cfg, txt, img, c.sc, c.cos_tab,
                                     c.sin_tab, c.dbl[i]);

    Mat<T> x(lt + li, d);
    if (lt > 0)
        x.topRows(lt) = txt;
    x.bottomRows(li) = img;
    c.sgl.resize(p.sgl.size());
    for (size_t i = 0; i < p.sgl.size(); ++i)
        detail::single_block_forward(p.sgl[i], cfg, x, c.sc, c.cos_tab,
                                     c.sin_tab, c.sgl[i]);

    // final layer on target tokens only
    c.tgt_in = x.middleRows(lt, target_len);
    Mat<T> sc_m = c.sc;
    c.final_mod_row = p.final_mod.forward(sc_m).row(0);
    Mat<T> ln_y = layer_norm(c.tgt_in, &c.final_ln);
    c.final_moded = detail::modulate(ln_y, c.final_mod_row, 0, d);
    return p.out_proj.forward(c.final_moded);
}

// Accumulates parameter gradients for one example into `grads`.
template <typename T>
void backward(const ModelParams<T>& p, const ModelConfig& cfg,
              const ForwardCache<T>& c, const Mat<T>& d_out,
              ModelParams<T>& grads) {
    const int d = cfg.model_dim;
    const Eigen::Index lt = static_cast<Eigen::Index>(c.text_tokens.size());
    const Eigen::Index li = c.image_tokens.rows();
    Row<T> d_sc = Row<T>::Zero(d);

    // final layer
    Mat<T> dmoded = p.out_proj.backward(c.final_moded, d_out, grads.out_proj);
    Row<T> dmod_final = Row<T>::Zero(2 * d);
    Mat<T> dln = detail::modulate_backward(c.final_ln.y, c.final_mod_row,
                                           dmoded, 0, d, dmod_final);
    Mat<T> dtgt = layer_norm_backward(c.final_ln, dln);
    {
        Mat<T> sc_m = c.sc;
        Mat<T> dmod_m = dmod_final;
        d_sc += p.final_mod.backward(sc_m, dmod_m, grads.final_mod).row(0);
    }

    Mat<T> dx = Mat<T>::Zero(lt + li, d);
    dx.middleRows(lt, c.target_len) = dtgt;

    for (size_t i = p.sgl.size(); i-- > 0;)
        detail::single_block_backward(p.sgl[i], cfg, c.sgl[i], dx, c.sc,
                                      c.cos_tab, c.sin_tab, grads.sgl[i], d_sc);

    Mat<T> dtxt = lt > 0 ? Mat<T>(dx.topRows(lt)) : Mat<T>(0, d);
    Mat<T> dimg = dx.bottomRows(li);
    for (size_t i = p.dbl.size(); i-- > 0;)
        detail::double_block_backward(p.dbl[i], cfg, c.dbl[i], dtxt, dimg,
                                      c.sc, c.cos_tab, c.sin_tab, grads.dbl[i],
                                      d_sc);

    p.img_in.backward(c.image_tokens, dimg, grads.img_in);

    // conditioning path
    Mat<T> d_cond = silu_backward(Mat<T>(c.cond), Mat<T>(d_sc));
    {
        Mat<T> time_act = silu(Mat<T>(c.time_h));
        Mat<T> d_time_act = p.time_in1.backward(time_act, d_cond, grads.time_in1);
        Mat<T> d_time_h = silu_backward(Mat<T>(c.time_h), d_time_act);
        Mat<T> temb_m = c.temb;
        p.time_in0.backward(temb_m, d_time_h, grads.time_in0);
    }
    {
        Mat<T> vec_act = silu(Mat<T>(c.vec_h));
        Mat<T> d_vec_act = p.vec_in1.backward(vec_act, d_cond, grads.vec_in1);
        Mat<T> d_vec_h = silu_backward(Mat<T>(c.vec_h), d_vec_act);
        Mat<T> pooled_m = c.pooled;
        Mat<T> d_pooled = p.vec_in0.backward(pooled_m, d_vec_h, grads.vec_in0);
        if (lt > 0) {
            Mat<T> d_txt_pool =
                Mat<T>::Ones(lt, 1) * (d_pooled.row(0) / static_cast<T>(lt));
            dtxt += d_txt_pool;
        }
    }
    if (lt > 0)
        p.txt_emb.backward(c.text_tokens, dtxt, grads.txt_emb);
}

}  // namespace icflow

#endif  // ICFLOW_MODEL_HPP
