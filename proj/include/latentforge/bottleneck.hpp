#ifndef LATENTFORGE_BOTTLENECK_HPP
#define LATENTFORGE_BOTTLENECK_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include "latentforge/minilm.hpp"
#include "latentforge/tensor.hpp"

namespace lf {

enum class PoolingMode : std::uint8_t { mean, last_hidden, cls };

enum class Placement : std::uint8_t { prefix, interleave };

// Init constants, calibrated on the factor-grammar corpus. The injector must
// start loud (step-0 attention reads it through fixed queries) and the
// posterior must start tight (sigma near exp(-5)) or reconstruction never
// locks on at small data scale.
inline constexpr double kInjectorInitStd = 0.5;
inline constexpr double kLogVarInit = -10.0;

struct LatentCode {
    Tensor mu;       // [1, D]
    Tensor log_var;  // [1, D], clamped to [-10, 10]
    Tensor z;        // [1, D]
    std::vector<double> epsilon;  // noise used for z, recorded for reproducibility
};

struct InjectorConfig {
    std::size_t latent_dim = 16;
    std::size_t n_injected = 4;  // S entries per layer
    std::size_t n_layers = 2;
    std::size_t d_model = 64;

    // Total W_m columns: S entries per layer, each one key + one value vector.
    std::size_t payload_cols() const { return n_injected * n_layers * 2 * d_model; }
    void validate() const;
};

// Masked arithmetic mean / final unmasked state / position-0 state.
Tensor pool(const EncoderOutput& enc, PoolingMode mode);

// Masked mean of per-token one-hot annotation rows; all-zero rows are
// legal (unannotated tokens) and simply dilute the mean.
Tensor pool_annotations(const Tensor& onehots, const std::vector<std::uint8_t>& mask);

// z = mu + exp(0.5*log_var) (.) eps. Null rng draws eps = 0 and aliases z = mu.
LatentCode reparameterize(const Tensor& mu, const Tensor& log_var, Rng* rng);
LatentCode reparameterize(const Tensor& mu, const Tensor& log_var,
                          const std::vector<double>& eps);

// Per-dimension KL(N(mu, exp(log_var)) || N(0, 1)): [1, D].
Tensor kl_divergence(const Tensor& mu, const Tensor& log_var);

// Linear map z -> synthetic KV cache entries. W_m is stored as one block per
// layer ([D, S*2*d_model] each); concatenated they form the logical map
// [D, S*L*2*d_model] with reshape order [layer, entry, (key||value)].
class CacheInjector {
public:
    CacheInjector(const InjectorConfig& cfg, Rng& rng);

    const InjectorConfig& config() const { return cfg_; }

    Placement placement = Placement::prefix;
    std::size_t interleave_stride = 1;  // k entries generated per splice

    // prefix: cache starts with S live entries per layer; interleave: the S
    // entries are staged as the cache's splice pool instead.
    KvCache inject(const Tensor& z) const;

    std::vector<NamedParam> named_params() const;  // w_m.layer{l}

private:
    InjectorConfig cfg_;
    std::vector<Tensor> w_m_;  // per layer [D, S*2*d_model]; empty when S = 0
};

// inject then greedily decode from BOS. temperature > 0 samples instead
// (requires rng). Output excludes BOS/EOS.
std::vector<int> generate(const TransformerLm& decoder, const CacheInjector& injector,
                          const Tensor& z, std::size_t max_tokens, double temperature = 0.0,
                          Rng* rng = nullptr);

struct VaeConfig {
    LmConfig encoder;
    LmConfig decoder;
    InjectorConfig injector;
    PoolingMode pooling = PoolingMode::mean;
    std::size_t n_annotation_classes = 0;  // 0 disables the annotation path
    Placement placement = Placement::prefix;
    std::size_t interleave_stride = 1;

    void validate() const;
};

// Encoder LM -> pooling (+ annotation pooling) -> linear projection to
// (mu, log_var) -> reparameterized z -> injected KV cache -> decoder LM.
class LmVae {
public:
    LmVae(const VaeConfig& cfg, Rng& rng);

    const VaeConfig& config() const { return cfg_; }
    const TransformerLm& encoder() const { return encoder_; }
    const TransformerLm& decoder() const { return decoder_; }
    const CacheInjector& injector() const { return injector_; }

    // Pooled sentence vector; annotations ([t, n_classes]) are mean-pooled
    // and appended when the annotation path is configured.
    Tensor pool_sentence(const EncoderOutput& enc, const Tensor* annotations) const;

    // Single linear map to 2*D, split into mu and clamped log_var.
    std::pair<Tensor, Tensor> project(const Tensor& pooled) const;

    LatentCode encode_latent(const std::vector<int>& tokens,
                             const std::vector<std::uint8_t>& mask, const Tensor* annotations,
                             Rng* noise) const;

    // Teacher-forced decoder logits under the cache injected from z.
    Tensor reconstruction_logits(const std::vector<int>& decoder_tokens, const Tensor& z) const;

    std::vector<int> generate(const Tensor& z, std::size_t max_tokens, double temperature = 0.0,
                              Rng* rng = nullptr) const;

    std::vector<NamedParam> named_params() const;       // all, name-prefixed
    std::vector<NamedParam> bottleneck_params() const;  // projection + W_m only
    void freeze_base(bool frozen) const;

private:
    VaeConfig cfg_;
    TransformerLm encoder_;
    TransformerLm decoder_;
    CacheInjector injector_;
    Tensor proj_w_;  // [enc_dim + n_classes, 2*D]
    Tensor proj_b_;  // [1, 2*D]
};

}  // namespace lf

#endif
