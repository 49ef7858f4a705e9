#include "latentforge/bottleneck.hpp"

#include <cmath>
#include <string>

namespace lf {

void InjectorConfig::validate() const {
    if (latent_dim == 0 || n_layers == 0 || d_model == 0) {
        throw ConfigError("injector dims must be positive");
    }
}

Tensor pool(const EncoderOutput& enc, PoolingMode mode) {
    const std::size_t t = enc.hidden_states.rows();
    if (enc.attention_mask.size() != t) {
        throw ConfigError("pooling mask length must match hidden states");
    }
    double n_live = 0.0;
    for (std::uint8_t m : enc.attention_mask) {
        n_live += m ? 1.0 : 0.0;
    }
    if (n_live == 0.0) {
        throw ConfigError("pooling needs at least one unmasked position");
    }
    switch (mode) {
        case PoolingMode::cls:
            return enc.cls_state;
        case PoolingMode::last_hidden:
            return enc.last_state;
        case PoolingMode::mean: {
            // Constant-weight row vector; masked positions weigh zero.
            std::vector<double> w(t, 0.0);
            for (std::size_t j = 0; j < t; ++j) {
                w[j] = enc.attention_mask[j] ? 1.0 / n_live : 0.0;
            }
            return matmul(Tensor::from(std::move(w), {1, t}), enc.hidden_states);
        }
    }
    throw ConfigError("unknown pooling mode");
}

Tensor pool_annotations(const Tensor& onehots, const std::vector<std::uint8_t>& mask) {
    const std::size_t t = onehots.rows(), c = onehots.cols();
    if (mask.size() != t) {
        throw ConfigError("annotation mask length must match rows");
    }
    for (std::size_t i = 0; i < t; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row_sum += onehots.at(i, j);
        }
        if (row_sum > 1.0 + 1e-12) {
            throw ConfigError("annotation rows must be one-hot or all-zero");
        }
    }
    double n_live = 0.0;
    for (std::uint8_t m : mask) {
        n_live += m ? 1.0 : 0.0;
    }
    if (n_live == 0.0) {
        throw ConfigError("annotation pooling needs at least one unmasked position");
    }
    std::vector<double> w(t, 0.0);
    for (std::size_t j = 0; j < t; ++j) {
        w[j] = mask[j] ? 1.0 / n_live : 0.0;
    }
    return matmul(Tensor::from(std::move(w), {1, t}), onehots);
}

LatentCode reparameterize(const Tensor& mu, const Tensor& log_var, Rng* rng) {
    if (rng == nullptr) {
        LatentCode code;
        code.mu = mu;
        code.log_var = log_var;
        code.z = mu;  // deterministic mode: eps = 0 exactly
        code.epsilon.assign(mu.numel(), 0.0);
        return code;
    }
    std::vector<double> eps(mu.numel());
    for (double& e : eps) {
        e = rng->normal();
    }
    return reparameterize(mu, log_var, eps);
}

LatentCode reparameterize(const Tensor& mu, const Tensor& log_var,
                          const std::vector<double>& eps) {
    if (mu.numel() != log_var.numel() || eps.size() != mu.numel()) {
        throw ConfigError("reparameterize dims disagree");
    }
    LatentCode code;
    code.mu = mu;
    code.log_var = log_var;
    code.epsilon = eps;
    Tensor noise = Tensor::from(eps, mu.shape());  // constant: grads flow to mu/log_var only
    code.z = add(mu, mul(exp(scale(log_var, 0.5)), noise));
    return code;
}

Tensor kl_divergence(const Tensor& mu, const Tensor& log_var) {
    if (mu.numel() != log_var.numel()) {
        throw ConfigError("kl_divergence dims disagree");
    }
    // 0.5 * (mu^2 + exp(log_var) - 1 - log_var), per dimension.
    Tensor t = add(mul(mu, mu), exp(log_var));
    return scale(add(t, add_scalar(neg(log_var), -1.0)), 0.5);
}

CacheInjector::CacheInjector(const InjectorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.n_injected == 0) {
        return;
    }
    const std::size_t cols = cfg_.n_injected * 2 * cfg_.d_model;
    w_m_.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        // Wider than the transformer init: injected entries compete with
        // token keys for attention from the very first step.
        w_m_.push_back(Tensor::randn({cfg_.latent_dim, cols}, rng, kInjectorInitStd));
    }
}

KvCache CacheInjector::inject(const Tensor& z) const {
    if (z.rows() != 1 || z.cols() != cfg_.latent_dim) {
        throw ConfigError("latent must be [1, " + std::to_string(cfg_.latent_dim) + "]");
    }
    KvCache cache(cfg_.n_layers);
    if (cfg_.n_injected == 0) {
        return cache;
    }
    std::size_t total_cols = 0;
    for (const Tensor& w : w_m_) {
        total_cols += w.cols();
    }
    if (total_cols != cfg_.payload_cols()) {
        throw ConfigError("W_m columns do not match S*L*2*d_model payload");
    }
    const std::size_t d = cfg_.d_model;
    std::vector<Tensor> pool_keys, pool_values;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        Tensor h = matmul(z, w_m_[l]);  // [1, S*2*d]
        Tensor keys, values;
        for (std::size_t e = 0; e < cfg_.n_injected; ++e) {
            Tensor k = slice_cols(h, e * 2 * d, e * 2 * d + d);
            Tensor v = slice_cols(h, e * 2 * d + d, (e + 1) * 2 * d);
            if (placement == Placement::prefix) {
                cache.layer(l).append(k, v, Provenance::injected);
            } else {
                keys = e == 0 ? k : concat_rows(keys, k);
                values = e == 0 ? v : concat_rows(values, v);
            }
        }
        if (placement == Placement::interleave) {
            pool_keys.push_back(keys);
            pool_values.push_back(values);
        }
    }
    if (placement == Placement::interleave) {
        cache.stage_pool(std::move(pool_keys), std::move(pool_values), interleave_stride);
    }
    return cache;
}

std::vector<NamedParam> CacheInjector::named_params() const {
    std::vector<NamedParam> out;
    for (std::size_t l = 0; l < w_m_.size(); ++l) {
        out.push_back({"w_m.layer" + std::to_string(l), w_m_[l]});
    }
    return out;
}

namespace {

int argmax_row(const Tensor& logits) {
    int best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits.at(0, j) > logits.at(0, best)) {
            best = static_cast<int>(j);
        }
    }
    return best;
}

int sample_row(const Tensor& logits, double temperature, Rng& rng) {
    Tensor p = softmax_rows(scale(logits, 1.0 / temperature));
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
        acc += p.at(0, j);
        if (u < acc) {
            return static_cast<int>(j);
        }
    }
    return static_cast<int>(p.cols() - 1);
}

}  // namespace

std::vector<int> generate(const TransformerLm& decoder, const CacheInjector& injector,
                          const Tensor& z, std::size_t max_tokens, double temperature,
                          Rng* rng) {
    if (temperature > 0.0 && rng == nullptr) {
        throw ConfigError("sampled generation needs an rng");
    }
    KvCache cache = injector.inject(z);
    std::vector<int> out;
    int token = decoder.config().bos_id;
    while (out.size() < max_tokens && cache.generated_count() < decoder.config().max_len) {
        Tensor logits = decoder.decode_step(token, cache);
        const int next = temperature > 0.0 ? sample_row(logits, temperature, *rng)
                                           : argmax_row(logits);
        if (next == decoder.config().eos_id) {
            break;
        }
        out.push_back(next);
        token = next;
    }
    return out;
}

void VaeConfig::validate() const {
    encoder.validate();
    decoder.validate();
    injector.validate();
    if (injector.n_layers != decoder.n_layers) {
        throw ConfigError("injector layer count must match the decoder");
    }
    if (injector.d_model != decoder.d_model) {
        throw ConfigError("injector d_model must match the decoder");
    }
    if (placement == Placement::interleave && interleave_stride == 0) {
        throw ConfigError("interleave stride must be >= 1");
    }
}

namespace {
const VaeConfig& validated(const VaeConfig& cfg) {
    cfg.validate();
    return cfg;
}
}  // namespace

LmVae::LmVae(const VaeConfig& cfg, Rng& rng)
    : cfg_(validated(cfg)),
      encoder_(cfg_.encoder, false, rng),
      decoder_(cfg_.decoder, true, rng),
      injector_(cfg_.injector, rng) {
    injector_.placement = cfg_.placement;
    injector_.interleave_stride = cfg_.interleave_stride;
    const std::size_t in_dim = cfg_.encoder.d_model + cfg_.n_annotation_classes;
    proj_w_ = Tensor::randn({in_dim, 2 * cfg_.injector.latent_dim}, rng, 0.02);
    proj_b_ = Tensor::zeros({1, 2 * cfg_.injector.latent_dim});
    // Start near-deterministic: the log-var head opens up only once the
    // reconstruction path can pay for the extra KL.
    std::vector<double>& b = proj_b_.mutable_value();
    for (std::size_t d = cfg_.injector.latent_dim; d < 2 * cfg_.injector.latent_dim; ++d) {
        b[d] = kLogVarInit;
    }
}

Tensor LmVae::pool_sentence(const EncoderOutput& enc, const Tensor* annotations) const {
    Tensor pooled = pool(enc, cfg_.pooling);
    if (cfg_.n_annotation_classes == 0) {
        if (annotations != nullptr) {
            throw ConfigError("annotations supplied but the annotation path is disabled");
        }
        return pooled;
    }
    Tensor ann;
    if (annotations != nullptr) {
        if (annotations->cols() != cfg_.n_annotation_classes) {
            throw ConfigError("annotation class count mismatch");
        }
        // Annotation pooling is always the masked mean.
        ann = pool_annotations(*annotations, enc.attention_mask);
    } else {
        ann = Tensor::zeros({1, cfg_.n_annotation_classes});
    }
    return concat_cols(pooled, ann);
}

std::pair<Tensor, Tensor> LmVae::project(const Tensor& pooled) const {
    if (pooled.rows() != 1 || pooled.cols() != proj_w_.rows()) {
        throw ConfigError("projection input dim " + std::to_string(pooled.cols()) +
                          " does not match trained layer " + std::to_string(proj_w_.rows()));
    }
    Tensor out = add(matmul(pooled, proj_w_), proj_b_);
    const std::size_t d = cfg_.injector.latent_dim;
    Tensor mu = slice_cols(out, 0, d);
    Tensor log_var = clamp(slice_cols(out, d, 2 * d), -10.0, 10.0);
    return {mu, log_var};
}

LatentCode LmVae::encode_latent(const std::vector<int>& tokens,
                                const std::vector<std::uint8_t>& mask,
                                const Tensor* annotations, Rng* noise) const {
    EncoderOutput enc = encoder_.encode(tokens, mask);
    auto [mu, log_var] = project(pool_sentence(enc, annotations));
    return reparameterize(mu, log_var, noise);
}

Tensor LmVae::reconstruction_logits(const std::vector<int>& decoder_tokens,
                                    const Tensor& z) const {
    KvCache cache = injector_.inject(z);
    return decoder_.full_forward(decoder_tokens, &cache);
}

std::vector<int> LmVae::generate(const Tensor& z, std::size_t max_tokens, double temperature,
                                 Rng* rng) const {
    return lf::generate(decoder_, injector_, z, max_tokens, temperature, rng);
}

std::vector<NamedParam> LmVae::named_params() const {
    std::vector<NamedParam> out;
    for (const auto& p : encoder_.named_params()) {
        out.push_back({"encoder." + p.name, p.tensor});
    }
    for (const auto& p : decoder_.named_params()) {
        out.push_back({"decoder." + p.name, p.tensor});
    }
    for (const auto& p : bottleneck_params()) {
        out.push_back(p);
    }
    return out;
}

std::vector<NamedParam> LmVae::bottleneck_params() const {
    std::vector<NamedParam> out;
    out.push_back({"proj.w", proj_w_});
    out.push_back({"proj.b", proj_b_});
    for (const auto& p : injector_.named_params()) {
        out.push_back({"inject." + p.name, p.tensor});
    }
    return out;
}

void LmVae::freeze_base(bool frozen) const {
    encoder_.set_requires_grad(!frozen);
    decoder_.set_requires_grad(!frozen);
    for (const auto& p : bottleneck_params()) {
        Tensor t = p.tensor;
        t.set_requires_grad(true);
    }
}

}  // namespace lf
