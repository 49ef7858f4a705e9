#ifndef LATENTFORGE_MINILM_HPP
#define LATENTFORGE_MINILM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "latentforge/tensor.hpp"

namespace lf {

struct LmConfig {
    std::size_t vocab_size = 64;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t max_len = 16;
    int pad_id = 0;
    int bos_id = 1;
    int eos_id = 2;

    std::size_t d_head() const { return d_model / n_heads; }
    std::size_t d_ff() const { return 4 * d_model; }
    void validate() const;  // throws ConfigError
};

enum class Provenance : std::uint8_t { injected, generated };

// One layer's KV store. Entries are appended in attention order; tags record
// provenance in insertion order. keys/values stay undefined while empty.
struct KvLayer {
    Tensor keys;    // [n, d_model]
    Tensor values;  // [n, d_model]
    std::vector<Provenance> tags;

    std::size_t size() const { return tags.size(); }
    void append(const Tensor& key_row, const Tensor& value_row, Provenance tag);
};

// Decoder-side cache. Injected entries arrive either live (prefix placement)
// or via a staged pool: with interleave stride k, one pool entry is appended
// after every k generated entries, cycling round-robin over the pool.
class KvCache {
public:
    explicit KvCache(std::size_t n_layers) : layers_(n_layers) {}

    std::size_t n_layers() const { return layers_.size(); }
    KvLayer& layer(std::size_t l) { return layers_[l]; }
    const KvLayer& layer(std::size_t l) const { return layers_[l]; }

    // keys/values: one [S, d_model] tensor per layer. stride must be >= 1.
    void stage_pool(std::vector<Tensor> keys, std::vector<Tensor> values, std::size_t stride);

    std::size_t pool_size() const;                 // S, 0 when nothing staged
    std::size_t interleave_stride() const { return stride_; }
    const Tensor& pool_keys(std::size_t l) const { return pool_keys_[l]; }
    const Tensor& pool_values(std::size_t l) const { return pool_values_[l]; }

    std::size_t generated_count() const { return n_generated_; }

    // Splice bookkeeping; decode_step calls this once per generated token.
    void note_generated();

private:
    std::vector<KvLayer> layers_;
    std::vector<Tensor> pool_keys_;
    std::vector<Tensor> pool_values_;
    std::size_t stride_ = 0;  // 0 = no staged pool
    std::size_t n_generated_ = 0;
    std::size_t next_copy_ = 0;
};

struct EncoderOutput {
    Tensor hidden_states;  // [t, d_model]
    Tensor cls_state;      // [1, d_model], position 0
    Tensor last_state;     // [1, d_model], final unmasked position
    std::vector<std::uint8_t> attention_mask;
};

// Attention weights for one decode step: weights[layer][head][cache entry].
struct AttentionTrace {
    std::vector<std::vector<std::vector<double>>> weights;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Pre-norm transformer, bidirectional (encoder) or causal with KV cache
// (decoder). Injected cache entries are attended as raw key/value vectors,
// bypass the per-layer projections, and carry no positional offset.
class TransformerLm {
public:
    TransformerLm(const LmConfig& cfg, bool causal, Rng& rng);

    const LmConfig& config() const { return cfg_; }
    bool causal() const { return causal_; }

    // Bidirectional pass; masked key positions are attended by nobody.
    EncoderOutput encode(const std::vector<int>& tokens,
                         const std::vector<std::uint8_t>& mask) const;

    // Teacher-forced causal pass. injected, when given, must be a fresh cache
    // (no generated entries); its live entries or staged pool become the
    // injected attention context.
    Tensor full_forward(const std::vector<int>& tokens, const KvCache* injected = nullptr) const;

    // Appends one generated entry per layer, attends over the whole cache
    // (self included), and returns next-token logits [1, vocab].
    Tensor decode_step(int token, KvCache& cache, AttentionTrace* trace = nullptr) const;

    KvCache make_cache() const { return KvCache(cfg_.n_layers); }

    std::vector<NamedParam> named_params() const;
    void set_requires_grad(bool b) const;

private:
    struct Block {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo;
        Tensor ln2_g, ln2_b, w_up, b_up, w_down, b_down;
    };

    Tensor embed(const std::vector<int>& tokens, std::size_t pos0) const;
    // bias: optional additive mask [rows(q), rows(k)].
    Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* bias,
                  std::vector<std::vector<double>>* trace_out) const;

    LmConfig cfg_;
    bool causal_;
    Tensor tok_emb_;  // [vocab, d_model]
    Tensor pos_emb_;  // [max_len, d_model]
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
    Tensor head_;  // [d_model, vocab], causal models only
};

}  // namespace lf

#endif
