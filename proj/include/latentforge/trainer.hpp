#ifndef LATENTFORGE_TRAINER_HPP
#define LATENTFORGE_TRAINER_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "latentforge/bottleneck.hpp"
#include "latentforge/corpus.hpp"
#include "latentforge/rng.hpp"
#include "latentforge/tensor.hpp"

namespace lf {

// Defaults reproduce the reference run on the bundled factor grammar: 600
// sentences, 50 epochs, full reconstruction at the deterministic latent.
struct TrainConfig {
    std::size_t epochs = 50;
    double learning_rate = 1e-3;
    std::size_t batch_size = 10;
    std::size_t latent_dim = 16;
    double max_beta = 1.0;
    double target_kl = 128.0;  // nats, spread uniformly over latent dimensions
    std::size_t n_cycles = 4;
    bool freeze_base = false;
    std::uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

// Cyclical KL annealing. total_steps splits into n_cycles equal cycles; beta
// ramps linearly 0 -> max_beta over the first half of each cycle, then holds.
// Cycle starts land on exact zeros whenever they fall on integer steps.
double beta_schedule(std::size_t step, std::size_t total_steps, std::size_t n_cycles,
                     double max_beta);

// total stays in the autodiff graph so callers can backpropagate through it;
// the remaining components are logged numbers.
struct LossBreakdown {
    Tensor total;
    double recon_nll = 0.0;
    double kl_raw = 0.0;          // summed over latent dimensions
    double kl_thresholded = 0.0;  // after the per-dimension free-bits floor
    double beta = 0.0;
};

// Teacher-forced reconstruction NLL plus beta * sum_i max(KL_i, target_kl/D)
// for one sentence; epsilon supplies the reparameterization noise.
LossBreakdown sentence_loss(const LmVae& model, const FactorSentence& sentence,
                            const std::vector<double>& epsilon, double beta, double target_kl);

// Same loss from an already pooled encoder vector (the frozen-encoder cache
// path); pooled must come from LmVae::pool_sentence for this sentence.
LossBreakdown sentence_loss_from_pooled(const LmVae& model, const FactorSentence& sentence,
                                        const Tensor& pooled, const std::vector<double>& epsilon,
                                        double beta, double target_kl);

struct StepMetrics {
    std::size_t step = 0;
    double beta = 0.0;
    double recon_nll = 0.0;
    double kl_raw = 0.0;
    double kl_thresholded = 0.0;
    double total = 0.0;
};

// CSV with header step,beta,recon_nll,kl_raw,kl_thresholded,total.
void write_metric_log(const std::string& path, const std::vector<StepMetrics>& log);

struct ParamCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
    double ratio = 0.0;  // trainable / total
};

// Counts live tensors, honoring the current requires_grad flags.
ParamCount count_parameters(const LmVae& model);
// Closed-form twin computed from the configs alone; agrees with the model
// overload exactly and scales to dimensions too large to instantiate.
ParamCount count_parameters(const VaeConfig& cfg, bool freeze_base);

// Adam over a fixed parameter list. Moments are exposed as named tensors
// (adam.m.<param>, adam.v.<param>) so checkpoints can carry them.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<NamedParam> params, double learning_rate, double beta1 = 0.9,
                  double beta2 = 0.999, double epsilon = 1e-8);

    void zero_grad() const;
    void step();  // one update from the accumulated gradients

    std::size_t step_count() const { return t_; }
    void set_step_count(std::size_t t) { t_ = t; }

    const std::vector<NamedParam>& params() const { return params_; }
    std::vector<NamedParam> moments() const;  // live handles, checkpoint order

private:
    std::vector<NamedParam> params_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// Snapshot of everything a resumed run needs: model and train configs, the
// tokenizer vocabulary, parameter and optimizer tensors, step, RNG state.
struct Checkpoint {
    VaeConfig model_cfg;
    TrainConfig train_cfg;
    std::vector<std::string> vocab;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<NamedParam> tensors;  // params first, then adam moments
};

// Single file: magic "LVF1", u64 LE header length, UTF-8 JSON header with the
// tensor manifest (name, shape, payload byte offset), then raw f64 LE data.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);  // throws on corrupt input

// Copies checkpoint tensors into the model's parameters by name. Shape
// mismatches and missing or unexpected names throw; adam.* entries are
// ignored here.
void restore_model(const LmVae& model, const Checkpoint& ck);

// Builds a fresh model from the stored configs and restores its weights.
LmVae model_from_checkpoint(const Checkpoint& ck);

// Single-threaded Adam loop, deterministic per seed. With freeze_base the
// pooled encoder outputs are cached per distinct sentence text, which is
// exact because frozen weights cannot drift.
class Trainer {
public:
    Trainer(const LmVae& model, const TrainConfig& cfg);

    // Runs n_epochs more epochs. The beta schedule always spans
    // cfg.epochs * ceil(|dataset| / batch_size) steps, so a restored run
    // continues the same curve; exceeding cfg.epochs in total throws.
    void run(const std::vector<FactorSentence>& dataset, std::size_t n_epochs);

    // Loss over one batch at a given beta; draws reparameterization noise
    // from the trainer RNG. Graph-building: callers own the active tape.
    LossBreakdown batch_loss(const std::vector<const FactorSentence*>& batch, double beta);

    const std::vector<StepMetrics>& log() const { return log_; }
    std::size_t step() const { return step_; }
    const LmVae& model() const { return model_; }

    Checkpoint make_checkpoint(const Tokenizer& tokenizer) const;
    void restore(const Checkpoint& ck);  // weights, moments, step, RNG

private:
    Tensor pooled_input(const FactorSentence& sentence);

    const LmVae& model_;
    TrainConfig cfg_;
    Rng rng_;
    AdamOptimizer opt_;
    std::vector<StepMetrics> log_;
    std::size_t step_ = 0;
    std::unordered_map<std::string, Tensor> pooled_cache_;
};

}  // namespace lf

#endif
