#include "cllora/model.hpp"

#include <algorithm>
#include <bit>
#include <limits>
#include <cmath>
#include <fmt/format.h>

#include "cllora/errors.hpp"
#include "cllora/numerics/kernels.hpp"
#include "cllora/numerics/ops.hpp"
#include "cllora/numerics/rng.hpp"
#include "cllora/numerics/sampling.hpp"

namespace cllora {

std::string_view to_string(LoraTarget t) {
    switch (t) {
    case LoraTarget::Query:
        return "q";
    case LoraTarget::Key:
        return "k";
    case LoraTarget::Value:
        return "v";
    case LoraTarget::Output:
        return "o";
    }
    return "?";
}

LoraTarget parse_lora_target(std::string_view name) {
    if (name == "q" || name == "query") {
        return LoraTarget::Query;
    }
    if (name == "k" || name == "key") {
        return LoraTarget::Key;
    }
    if (name == "v" || name == "value") {
        return LoraTarget::Value;
    }
    if (name == "o" || name == "output") {
        return LoraTarget::Output;
    }
    throw UsageError(fmt::format("unknown LoRA target '{}' (expected q, k, v or o)", name));
}

std::vector<LoraTarget> parse_lora_targets(std::string_view list) {
    std::vector<LoraTarget> out;
    std::size_t start = 0;
    while (start <= list.size()) {
        auto end = list.find(',', start);
        if (end == std::string_view::npos) {
            end = list.size();
        }
        auto item = list.substr(start, end - start);
        if (!item.empty()) {
            out.push_back(parse_lora_target(item));
        }
        start = end + 1;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::string format_lora_targets(std::span<const LoraTarget> targets) {
    std::string s;
    for (auto t : targets) {
        if (!s.empty()) {
            s += ',';
        }
        s += to_string(t);
    }
    return s;
}

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1) {
        throw UsageError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw UsageError(fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
    }
    if (lora_rank < 1 || 4 * lora_rank > d_model) {
        throw UsageError(fmt::format("lora rank {} must be in [1, d_model/4 = {}]", lora_rank, d_model / 4));
    }
    if (lora_targets.empty()) {
        throw UsageError("at least one LoRA target is required");
    }
    if (!std::is_sorted(lora_targets.begin(), lora_targets.end()) ||
        std::adjacent_find(lora_targets.begin(), lora_targets.end()) != lora_targets.end()) {
        throw UsageError("LoRA targets must be sorted and unique");
    }
    if (!(lora_init_std > 0.0) || !std::isfinite(lora_init_std)) {
        throw UsageError(fmt::format("lora_init_std must be positive, got {}", lora_init_std));
    }
}

std::uint64_t ModelConfig::fingerprint() const {
    auto canon = fmt::format("vocab={};d_model={};layers={};heads={};d_ff={};seq={};rank={};targets={}", vocab_size,
                             d_model, n_layers, n_heads, d_ff, max_seq_len, lora_rank,
                             format_lora_targets(lora_targets));
    return fnv1a64(canon);
}

std::size_t FrozenBase::parameter_count() const {
    std::size_t n = token_embedding.size() + position_embedding.size() + final_gain.size() + final_bias.size() +
                    unembedding.size();
    for (const auto& l : layers) {
        n += l.ln1_gain.size() + l.ln1_bias.size() + l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size() +
             l.ln2_gain.size() + l.ln2_bias.size() + l.w1.size() + l.b1.size() + l.w2.size() + l.b2.size();
    }
    return n;
}

bool FrozenBase::bitwise_equal(const FrozenBase& other) const {
    // Matrix equality compares doubles with ==, which already distinguishes
    // every finite value except signed zeros; compare raw bytes instead.
    auto same = [](const Matrix& a, const Matrix& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() &&
               std::equal(a.values().begin(), a.values().end(), b.values().begin(), [](double x, double y) {
                   return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
               });
    };
    if (layers.size() != other.layers.size()) {
        return false;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& a = layers[i];
        const auto& b = other.layers[i];
        if (!(same(a.ln1_gain, b.ln1_gain) && same(a.ln1_bias, b.ln1_bias) && same(a.wq, b.wq) &&
              same(a.wk, b.wk) && same(a.wv, b.wv) && same(a.wo, b.wo) && same(a.ln2_gain, b.ln2_gain) &&
              same(a.ln2_bias, b.ln2_bias) && same(a.w1, b.w1) && same(a.b1, b.b1) && same(a.w2, b.w2) &&
              same(a.b2, b.b2))) {
            return false;
        }
    }
    return same(token_embedding, other.token_embedding) && same(position_embedding, other.position_embedding) &&
           same(final_gain, other.final_gain) && same(final_bias, other.final_bias) &&
           same(unembedding, other.unembedding);
}

const LoraFactors* LoraAdapter::find(std::size_t layer, LoraTarget target) const {
    for (const auto& f : factors) {
        if (f.layer == layer && f.target == target) {
            return &f;
        }
    }
    return nullptr;
}

std::size_t LoraAdapter::parameter_count() const {
    std::size_t n = 0;
    for (const auto& f : factors) {
        n += f.a.size() + f.b.size();
    }
    return n;
}

LoraAdapter LoraAdapter::zeros_like() const {
    LoraAdapter z;
    z.factors.reserve(factors.size());
    for (const auto& f : factors) {
        z.factors.push_back({f.layer, f.target, Matrix(f.a.rows(), f.a.cols()), Matrix(f.b.rows(), f.b.cols())});
    }
    return z;
}

namespace {

// Fan-in scaled weights keep every residual branch O(1) at init; the
// unembedding then yields O(1) logits from the unit-variance final norm.
Matrix init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    return sample_normal(rng, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

} // namespace

FrozenBase init_base(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng root = Rng(seed).split("frozen-base");
    const std::size_t d = config.d_model;
    FrozenBase base;
    base.config = config;
    {
        Rng r = root.split("token-embedding");
        base.token_embedding = sample_normal(r, config.vocab_size, d, 1.0);
    }
    {
        Rng r = root.split("position-embedding");
        base.position_embedding = sample_normal(r, config.max_seq_len, d, 0.5);
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        Rng r = root.split("layer", l);
        LayerWeights w;
        w.ln1_gain = Matrix(1, d, 1.0);
        w.ln1_bias = Matrix(1, d, 0.0);
        w.wq = init_weight(r, d, d);
        w.wk = init_weight(r, d, d);
        w.wv = init_weight(r, d, d);
        w.wo = init_weight(r, d, d);
        w.ln2_gain = Matrix(1, d, 1.0);
        w.ln2_bias = Matrix(1, d, 0.0);
        w.w1 = init_weight(r, d, config.d_ff);
        w.b1 = Matrix(1, config.d_ff, 0.0);
        w.w2 = init_weight(r, config.d_ff, d);
        w.b2 = Matrix(1, d, 0.0);
        base.layers.push_back(std::move(w));
    }
    base.final_gain = Matrix(1, d, 1.0);
    base.final_bias = Matrix(1, d, 0.0);
    {
        Rng r = root.split("unembedding");
        base.unembedding = sample_normal(r, d, config.vocab_size, 2.0 / std::sqrt(static_cast<double>(d)));
    }
    return base;
}

LoraAdapter init_adapter(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng root = Rng(seed).split("lora-adapter");
    LoraAdapter adapter;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (auto t : config.lora_targets) {
            Rng r = root.split("factor", l * 8 + static_cast<std::size_t>(t));
            LoraFactors f;
            f.layer = l;
            f.target = t;
            f.a = sample_normal(r, config.d_model, config.lora_rank, config.lora_init_std);
            f.b = Matrix(config.lora_rank, config.d_model, 0.0);
            adapter.factors.push_back(std::move(f));
        }
    }
    return adapter;
}

InitializedModel init_model(const ModelConfig& config, std::uint64_t seed) {
    return {init_base(config, seed), init_adapter(config, seed)};
}

namespace {

struct ProjectionCache {
    Matrix u; // x A, present only when adapted
};

struct LayerCache {
    Matrix x_in;
    LayerNormCache ln1;
    Matrix h1;
    Matrix q, k, v;
    ProjectionCache pq, pk, pv, po;
    std::vector<Matrix> probs; // per head, T x T (upper triangle zero)
    Matrix att;
    LayerNormCache ln2;
    Matrix h2;
    Matrix z; // pre-activation of the MLP
    Matrix g; // gelu(z)
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    LayerNormCache final_ln;
    Matrix final_h;
};

const LoraFactors* factor_for(const LoraAdapter* adapter, std::size_t layer, LoraTarget t) {
    return adapter == nullptr ? nullptr : adapter->find(layer, t);
}

Matrix project(const Matrix& in, const Matrix& w, const LoraFactors* f, ProjectionCache* cache) {
    Matrix out = matmul(in, w);
    if (f != nullptr) {
        Matrix u = matmul(in, f->a);
        add_inplace(out, matmul(u, f->b));
        if (cache != nullptr) {
            cache->u = std::move(u);
        }
    }
    return out;
}

// Returns dL/d(in); adds factor gradients into `grad`.
Matrix project_backward(const Matrix& in, const Matrix& dout, const Matrix& w, const LoraFactors* f,
                        const ProjectionCache& cache, LoraFactors* grad) {
    Matrix din = matmul_bt(dout, w);
    if (f != nullptr) {
        add_inplace(grad->b, matmul_at(cache.u, dout));
        Matrix du = matmul_bt(dout, f->b);
        add_inplace(grad->a, matmul_at(in, du));
        add_inplace(din, matmul_bt(du, f->a));
    }
    return din;
}

void check_tokens(const FrozenBase& base, std::span<const std::uint32_t> tokens) {
    const auto& cfg = base.config;
    if (tokens.empty()) {
        throw DataError("forward: empty token sequence");
    }
    if (tokens.size() > cfg.max_seq_len) {
        throw DataError(fmt::format("forward: sequence of {} tokens exceeds max_seq_len {}", tokens.size(),
                                    cfg.max_seq_len));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab_size) {
            throw DataError(fmt::format("forward: token id {} at position {} outside vocabulary of {}", tokens[i], i,
                                        cfg.vocab_size));
        }
    }
}

void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads, Matrix& att,
                      std::vector<Matrix>* probs_out) {
    const std::size_t t_len = q.rows();
    const std::size_t d = q.cols();
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    att = Matrix(t_len, d);
    if (probs_out != nullptr) {
        probs_out->assign(n_heads, Matrix());
    }
    std::vector<double> row(t_len);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        Matrix p(t_len, t_len);
        for (std::size_t i = 0; i < t_len; ++i) {
            const double* qi = q.data() + i * d + off;
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kj = k.data() + j * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += qi[c] * kj[c];
                }
                row[j] = s * scale;
                top = std::max(top, row[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                row[j] = std::exp(row[j] - top);
                sum += row[j];
            }
            double* out = att.data() + i * d + off;
            for (std::size_t j = 0; j <= i; ++j) {
                double pij = row[j] / sum;
                p(i, j) = pij;
                const double* vj = v.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                    out[c] += pij * vj[c];
                }
            }
        }
        if (probs_out != nullptr) {
            (*probs_out)[h] = std::move(p);
        }
    }
}

void causal_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<Matrix>& probs,
                               const Matrix& datt, Matrix& dq, Matrix& dk, Matrix& dv) {
    const std::size_t t_len = q.rows();
    const std::size_t d = q.cols();
    const std::size_t n_heads = probs.size();
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dq = Matrix(t_len, d);
    dk = Matrix(t_len, d);
    dv = Matrix(t_len, d);
    std::vector<double> dp(t_len);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix& p = probs[h];
        for (std::size_t i = 0; i < t_len; ++i) {
            const double* gi = datt.data() + i * d + off;
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = v.data() + j * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                    s += gi[c] * vj[c];
                }
                dp[j] = s;
                dot += p(i, j) * s;
                double* dvj = dv.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                    dvj[c] += p(i, j) * gi[c];
                }
            }
            const double* qi = q.data() + i * d + off;
            double* dqi = dq.data() + i * d + off;
            for (std::size_t j = 0; j <= i; ++j) {
                double ds = p(i, j) * (dp[j] - dot) * scale;
                const double* kj = k.data() + j * d + off;
                double* dkj = dk.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
}

Matrix run_forward(const FrozenBase& base, const LoraAdapter* adapter, std::span<const std::uint32_t> tokens,
                   ForwardCache* cache) {
    check_tokens(base, tokens);
    const auto& cfg = base.config;
    const std::size_t t_len = tokens.size();
    const std::size_t d = cfg.d_model;

    Matrix x(t_len, d);
    for (std::size_t i = 0; i < t_len; ++i) {
        auto te = base.token_embedding.row(tokens[i]);
        auto pe = base.position_embedding.row(i);
        auto out = x.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            out[c] = te[c] + pe[c];
        }
    }
    if (cache != nullptr) {
        cache->layers.assign(cfg.n_layers, LayerCache{});
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& w = base.layers[l];
        LayerCache local;
        LayerCache& c = cache != nullptr ? cache->layers[l] : local;
        c.h1 = layer_norm(x, w.ln1_gain, w.ln1_bias, &c.ln1);
        c.q = project(c.h1, w.wq, factor_for(adapter, l, LoraTarget::Query), &c.pq);
        c.k = project(c.h1, w.wk, factor_for(adapter, l, LoraTarget::Key), &c.pk);
        c.v = project(c.h1, w.wv, factor_for(adapter, l, LoraTarget::Value), &c.pv);
        causal_attention(c.q, c.k, c.v, cfg.n_heads, c.att, cache != nullptr ? &c.probs : nullptr);
        add_inplace(x, project(c.att, w.wo, factor_for(adapter, l, LoraTarget::Output), &c.po));

        c.h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, &c.ln2);
        c.z = matmul(c.h2, w.w1);
        add_row_bias(c.z, w.b1);
        c.g = gelu(c.z);
        Matrix m = matmul(c.g, w.w2);
        add_row_bias(m, w.b2);
        add_inplace(x, m);
    }

    LayerNormCache fin;
    Matrix h = layer_norm(x, base.final_gain, base.final_bias, &fin);
    Matrix logits = matmul(h, base.unembedding);
    if (cache != nullptr) {
        cache->final_ln = std::move(fin);
        cache->final_h = std::move(h);
    }
    return logits;
}

void run_backward(const FrozenBase& base, const LoraAdapter& adapter, const ForwardCache& cache,
                  const Matrix& dlogits, LoraAdapter& grads) {
    const auto& cfg = base.config;
    Matrix dx = layer_norm_backward_input(matmul_bt(dlogits, base.unembedding), cache.final_ln, base.final_gain);

    auto grad_for = [&](std::size_t layer, LoraTarget t) -> LoraFactors* {
        for (auto& f : grads.factors) {
            if (f.layer == layer && f.target == t) {
                return &f;
            }
        }
        return nullptr;
    };

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& w = base.layers[li];
        const auto& c = cache.layers[li];

        // MLP branch
        Matrix dg = matmul_bt(dx, w.w2);
        Matrix dz = gelu_backward(c.z, dg);
        Matrix dh2 = matmul_bt(dz, w.w1);
        add_inplace(dx, layer_norm_backward_input(dh2, c.ln2, w.ln2_gain));

        // attention branch
        Matrix datt = project_backward(c.att, dx, w.wo, adapter.find(li, LoraTarget::Output), c.po,
                                       grad_for(li, LoraTarget::Output));
        Matrix dq, dk, dv;
        causal_attention_backward(c.q, c.k, c.v, c.probs, datt, dq, dk, dv);
        Matrix dh1 = project_backward(c.h1, dq, w.wq, adapter.find(li, LoraTarget::Query), c.pq,
                                      grad_for(li, LoraTarget::Query));
        add_inplace(dh1, project_backward(c.h1, dk, w.wk, adapter.find(li, LoraTarget::Key), c.pk,
                                          grad_for(li, LoraTarget::Key)));
        add_inplace(dh1, project_backward(c.h1, dv, w.wv, adapter.find(li, LoraTarget::Value), c.pv,
                                          grad_for(li, LoraTarget::Value)));
        if (li > 0) {
            add_inplace(dx, layer_norm_backward_input(dh1, c.ln1, w.ln1_gain));
        }
    }
}

} // namespace

Matrix forward(const FrozenBase& base, const LoraAdapter* adapter, std::span<const std::uint32_t> tokens) {
    return run_forward(base, adapter, tokens, nullptr);
}

LossAndGrads loss_and_grads(const FrozenBase& base, const LoraAdapter& adapter,
                            std::span<const TrainingSequence> batch) {
    if (batch.empty()) {
        throw DataError("loss_and_grads: empty batch");
    }
    LossAndGrads out;
    for (const auto& s : batch) {
        out.tokens += s.targets.size();
    }
    if (out.tokens == 0) {
        throw DataError("loss_and_grads: batch has no target tokens");
    }
    out.grads = adapter.zeros_like();
    const double inv = 1.0 / static_cast<double>(out.tokens);
    double nll = 0.0;
    ForwardCache cache;
    Matrix dlogits;
    for (const auto& s : batch) {
        Matrix logits = run_forward(base, &adapter, s.inputs, &cache);
        nll += cross_entropy_sum(logits, s.targets, inv, &dlogits);
        run_backward(base, adapter, cache, dlogits, out.grads);
    }
    out.loss = nll * inv;
    return out;
}

double batch_loss(const FrozenBase& base, const LoraAdapter* adapter, std::span<const TrainingSequence> batch) {
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : batch) {
        nll += cross_entropy_sum(run_forward(base, adapter, s.inputs, nullptr), s.targets, 0.0, nullptr);
        tokens += s.targets.size();
    }
    if (tokens == 0) {
        throw DataError("batch_loss: batch has no target tokens");
    }
    return nll / static_cast<double>(tokens);
}

EvalResult evaluate(const FrozenBase& base, const LoraAdapter* adapter, const Corpus& corpus,
                    std::span<const std::uint32_t> doc_ids) {
    std::vector<double> nll(doc_ids.size(), 0.0);
    std::vector<std::size_t> tokens(doc_ids.size(), 0);
    const auto n = static_cast<std::ptrdiff_t>(doc_ids.size());
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        auto seq = make_training_sequence(corpus.at(doc_ids[static_cast<std::size_t>(i)]), base.config.max_seq_len);
        Matrix logits = run_forward(base, adapter, seq.inputs, nullptr);
        nll[static_cast<std::size_t>(i)] = cross_entropy_sum(logits, seq.targets, 0.0, nullptr);
        tokens[static_cast<std::size_t>(i)] = seq.targets.size();
    }
    EvalResult r;
    for (std::size_t i = 0; i < nll.size(); ++i) {
        r.nll_sum += nll[i];
        r.tokens += tokens[i];
    }
    return r;
}

std::size_t count_trainable(std::size_t layers, std::size_t d_model, std::size_t rank,
                            std::span<const LoraTarget> targets) {
    // Every supported target is a square d_model x d_model projection.
    return layers * targets.size() * rank * (d_model + d_model);
}

std::size_t count_trainable(const ModelConfig& config) {
    return count_trainable(config.n_layers, config.d_model, config.lora_rank, config.lora_targets);
}

} // namespace cllora
