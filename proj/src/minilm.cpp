#include "latentforge/minilm.hpp"

#include <cmath>
#include <string>

namespace lf {

namespace {

constexpr double kMaskOff = -1e30;

void check_token_ids(const std::vector<int>& tokens, std::size_t vocab) {
    for (int id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
        }
    }
}

}  // namespace

void LmConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0) {
        throw ConfigError("lm config dims must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (max_len < 2) {
        throw ConfigError("max_len must be at least 2");
    }
}

void KvLayer::append(const Tensor& key_row, const Tensor& value_row, Provenance tag) {
    if (key_row.rows() != 1 || value_row.rows() != 1 || key_row.cols() != value_row.cols()) {
        throw ConfigError("cache entries are single rows of equal width");
    }
    if (tags.empty()) {
        keys = key_row;
        values = value_row;
    } else {
        keys = concat_rows(keys, key_row);
        values = concat_rows(values, value_row);
    }
    tags.push_back(tag);
}

void KvCache::stage_pool(std::vector<Tensor> keys, std::vector<Tensor> values, std::size_t stride) {
    if (keys.size() != layers_.size() || values.size() != layers_.size()) {
        throw ConfigError("staged pool must cover every layer");
    }
    if (stride == 0) {
        throw ConfigError("interleave stride must be >= 1");
    }
    pool_keys_ = std::move(keys);
    pool_values_ = std::move(values);
    stride_ = stride;
    next_copy_ = 0;
}

std::size_t KvCache::pool_size() const {
    return pool_keys_.empty() || !pool_keys_[0].defined() ? 0 : pool_keys_[0].rows();
}

void KvCache::note_generated() {
    ++n_generated_;
    const std::size_t s = pool_size();
    if (stride_ == 0 || s == 0 || n_generated_ % stride_ != 0) {
        return;
    }
    const std::size_t row = next_copy_ % s;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].append(slice_rows(pool_keys_[l], row, row + 1),
                          slice_rows(pool_values_[l], row, row + 1), Provenance::injected);
    }
    ++next_copy_;
}

TransformerLm::TransformerLm(const LmConfig& cfg, bool causal, Rng& rng)
    : cfg_(cfg), causal_(causal) {
    cfg_.validate();
    const double init_std = 0.02;
    tok_emb_ = Tensor::randn({cfg_.vocab_size, cfg_.d_model}, rng, init_std);
    pos_emb_ = Tensor::randn({cfg_.max_len, cfg_.d_model}, rng, init_std);
    blocks_.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        Block b;
        b.ln1_g = Tensor::full({cfg_.d_model}, 1.0);
        b.ln1_b = Tensor::zeros({cfg_.d_model});
        b.wq = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, init_std);
        b.wk = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, init_std);
        b.wv = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, init_std);
        b.wo = Tensor::randn({cfg_.d_model, cfg_.d_model}, rng, init_std);
        b.ln2_g = Tensor::full({cfg_.d_model}, 1.0);
        b.ln2_b = Tensor::zeros({cfg_.d_model});
        b.w_up = Tensor::randn({cfg_.d_model, cfg_.d_ff()}, rng, init_std);
        b.b_up = Tensor::zeros({1, cfg_.d_ff()});
        b.w_down = Tensor::randn({cfg_.d_ff(), cfg_.d_model}, rng, init_std);
        b.b_down = Tensor::zeros({1, cfg_.d_model});
        blocks_.push_back(std::move(b));
    }
    lnf_g_ = Tensor::full({cfg_.d_model}, 1.0);
    lnf_b_ = Tensor::zeros({cfg_.d_model});
    if (causal_) {
        head_ = Tensor::randn({cfg_.d_model, cfg_.vocab_size}, rng, init_std);
    }
}

Tensor TransformerLm::embed(const std::vector<int>& tokens, std::size_t pos0) const {
    check_token_ids(tokens, cfg_.vocab_size);
    if (pos0 + tokens.size() > cfg_.max_len) {
        throw ConfigError("sequence exceeds max_len " + std::to_string(cfg_.max_len));
    }
    return add(gather_rows(tok_emb_, tokens), slice_rows(pos_emb_, pos0, pos0 + tokens.size()));
}

Tensor TransformerLm::attend(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor* bias,
                             std::vector<std::vector<double>>* trace_out) const {
    const std::size_t dh = cfg_.d_head();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out;
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        if (bias != nullptr) {
            scores = add(scores, *bias);
        }
        Tensor w = softmax_rows(scores);
        if (trace_out != nullptr) {
            std::vector<double> row(w.value().begin(), w.value().begin() + w.cols());
            trace_out->push_back(std::move(row));
        }
        Tensor oh = matmul(w, vh);
        out = (h == 0) ? oh : concat_cols(out, oh);
    }
    return out;
}

EncoderOutput TransformerLm::encode(const std::vector<int>& tokens,
                                    const std::vector<std::uint8_t>& mask) const {
    if (causal_) {
        throw ConfigError("encode() requires a bidirectional model");
    }
    if (tokens.empty() || tokens.size() != mask.size()) {
        throw ConfigError("encode() needs non-empty tokens with a mask of equal length");
    }
    std::size_t last_unmasked = tokens.size();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            last_unmasked = i;
        }
    }
    if (last_unmasked == tokens.size()) {
        throw ConfigError("encode() needs at least one unmasked position");
    }
    const std::size_t t = tokens.size();
    // Masked keys are shut off for every query; masked queries produce
    // states that the pooling contract excludes.
    Tensor bias = Tensor::zeros({t, t});
    for (std::size_t j = 0; j < t; ++j) {
        if (!mask[j]) {
            for (std::size_t i = 0; i < t; ++i) {
                bias.mutable_value()[i * t + j] = kMaskOff;
            }
        }
    }
    Tensor x = embed(tokens, 0);
    for (const Block& b : blocks_) {
        Tensor xn = layernorm(x, b.ln1_g, b.ln1_b);
        Tensor attn = attend(matmul(xn, b.wq), matmul(xn, b.wk), matmul(xn, b.wv), &bias, nullptr);
        x = add(x, matmul(attn, b.wo));
        Tensor xm = layernorm(x, b.ln2_g, b.ln2_b);
        Tensor h = tanh(add(matmul(xm, b.w_up), b.b_up));
        x = add(x, add(matmul(h, b.w_down), b.b_down));
    }
    x = layernorm(x, lnf_g_, lnf_b_);
    EncoderOutput out;
    out.hidden_states = x;
    out.cls_state = slice_rows(x, 0, 1);
    out.last_state = slice_rows(x, last_unmasked, last_unmasked + 1);
    out.attention_mask = mask;
    return out;
}

Tensor TransformerLm::full_forward(const std::vector<int>& tokens, const KvCache* injected) const {
    if (!causal_) {
        throw ConfigError("full_forward() requires a causal model");
    }
    if (tokens.empty()) {
        throw ConfigError("full_forward() needs at least one token");
    }
    if (injected != nullptr) {
        if (injected->n_layers() != cfg_.n_layers) {
            throw ConfigError("injected cache layer count mismatch");
        }
        if (injected->generated_count() != 0) {
            throw ConfigError("full_forward() expects a fresh cache");
        }
    }
    const std::size_t t = tokens.size();

    // Injected context per layer plus its per-query visibility column count.
    const std::size_t stride = injected ? injected->interleave_stride() : 0;
    const std::size_t pool_s = injected ? injected->pool_size() : 0;
    std::size_t n_inj = 0;
    if (injected != nullptr) {
        if (stride > 0 && pool_s > 0) {
            n_inj = (t - 1) / stride;  // copies spliced after every `stride` generated entries
        } else if (injected->layer(0).size() > 0) {
            n_inj = injected->layer(0).size();
        }
    }

    Tensor bias = Tensor::zeros({t, n_inj + t});
    for (std::size_t i = 0; i < t; ++i) {
        double* row = bias.mutable_value().data() + i * (n_inj + t);
        for (std::size_t c = 0; c < n_inj; ++c) {
            const bool visible = (stride == 0) || (c < i / stride);
            if (!visible) {
                row[c] = kMaskOff;
            }
        }
        for (std::size_t j = i + 1; j < t; ++j) {
            row[n_inj + j] = kMaskOff;
        }
    }

    Tensor x = embed(tokens, 0);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Block& b = blocks_[l];
        Tensor xn = layernorm(x, b.ln1_g, b.ln1_b);
        Tensor q = matmul(xn, b.wq);
        Tensor k = matmul(xn, b.wk);
        Tensor v = matmul(xn, b.wv);
        if (n_inj > 0) {
            Tensor ik, iv;
            if (stride > 0) {
                std::vector<int> rows(n_inj);
                for (std::size_t c = 0; c < n_inj; ++c) {
                    rows[c] = static_cast<int>(c % pool_s);
                }
                ik = gather_rows(injected->pool_keys(l), rows);
                iv = gather_rows(injected->pool_values(l), rows);
            } else {
                ik = injected->layer(l).keys;
                iv = injected->layer(l).values;
            }
            k = concat_rows(ik, k);
            v = concat_rows(iv, v);
        }
        Tensor attn = attend(q, k, v, &bias, nullptr);
        x = add(x, matmul(attn, b.wo));
        Tensor xm = layernorm(x, b.ln2_g, b.ln2_b);
        Tensor h = tanh(add(matmul(xm, b.w_up), b.b_up));
        x = add(x, add(matmul(h, b.w_down), b.b_down));
    }
    x = layernorm(x, lnf_g_, lnf_b_);
    return matmul(x, head_);
}

Tensor TransformerLm::decode_step(int token, KvCache& cache, AttentionTrace* trace) const {
    if (!causal_) {
        throw ConfigError("decode_step() requires a causal model");
    }
    if (cache.n_layers() != cfg_.n_layers) {
        throw ConfigError("cache layer count " + std::to_string(cache.n_layers()) +
                          " does not match model layers " + std::to_string(cfg_.n_layers));
    }
    if (trace != nullptr) {
        trace->weights.assign(cfg_.n_layers, {});
    }
    Tensor x = embed({token}, cache.generated_count());
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Block& b = blocks_[l];
        Tensor xn = layernorm(x, b.ln1_g, b.ln1_b);
        Tensor q = matmul(xn, b.wq);
        cache.layer(l).append(matmul(xn, b.wk), matmul(xn, b.wv), Provenance::generated);
        Tensor attn = attend(q, cache.layer(l).keys, cache.layer(l).values, nullptr,
                             trace ? &trace->weights[l] : nullptr);
        x = add(x, matmul(attn, b.wo));
        Tensor xm = layernorm(x, b.ln2_g, b.ln2_b);
        Tensor h = tanh(add(matmul(xm, b.w_up), b.b_up));
        x = add(x, add(matmul(h, b.w_down), b.b_down));
    }
    cache.note_generated();
    x = layernorm(x, lnf_g_, lnf_b_);
    return matmul(x, head_);
}

std::vector<NamedParam> TransformerLm::named_params() const {
    std::vector<NamedParam> out;
    out.push_back({"tok_emb", tok_emb_});
    out.push_back({"pos_emb", pos_emb_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "ln1.g", b.ln1_g});
        out.push_back({p + "ln1.b", b.ln1_b});
        out.push_back({p + "wq", b.wq});
        out.push_back({p + "wk", b.wk});
        out.push_back({p + "wv", b.wv});
        out.push_back({p + "wo", b.wo});
        out.push_back({p + "ln2.g", b.ln2_g});
        out.push_back({p + "ln2.b", b.ln2_b});
        out.push_back({p + "mlp.w_up", b.w_up});
        out.push_back({p + "mlp.b_up", b.b_up});
        out.push_back({p + "mlp.w_down", b.w_down});
        out.push_back({p + "mlp.b_down", b.b_down});
    }
    out.push_back({"ln_f.g", lnf_g_});
    out.push_back({"ln_f.b", lnf_b_});
    if (head_.defined()) {
        out.push_back({"head", head_});
    }
    return out;
}

void TransformerLm::set_requires_grad(bool b) const {
    for (const NamedParam& p : named_params()) {
        Tensor t = p.tensor;
        t.set_requires_grad(b);
    }
}

}  // namespace lf
