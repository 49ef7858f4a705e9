#include "latentforge/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lf {

namespace {

using nlohmann::json;

const TrainConfig& validated(const TrainConfig& cfg) {
    cfg.validate();
    return cfg;
}

// Collects the live trainable handles after applying the freeze flag.
std::vector<NamedParam> trainable_params(const LmVae& model, bool freeze_base) {
    model.freeze_base(freeze_base);
    std::vector<NamedParam> out;
    for (NamedParam& p : model.named_params()) {
        if (p.tensor.requires_grad()) {
            out.push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be positive and finite");
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be at least 1");
    }
    if (latent_dim == 0) {
        throw ConfigError("latent_dim must be at least 1");
    }
    if (!(max_beta > 0.0) || max_beta > 1.0) {
        throw ConfigError("max_beta must lie in (0, 1]");
    }
    if (!(target_kl >= 0.0) || !std::isfinite(target_kl)) {
        throw ConfigError("target_kl must be non-negative and finite");
    }
    if (n_cycles == 0) {
        throw ConfigError("n_cycles must be at least 1");
    }
}

double beta_schedule(std::size_t step, std::size_t total_steps, std::size_t n_cycles,
                     double max_beta) {
    if (total_steps == 0) {
        throw ConfigError("schedule needs at least one step");
    }
    if (n_cycles == 0 || n_cycles > total_steps) {
        throw ConfigError("n_cycles must lie in [1, total_steps]");
    }
    if (step >= total_steps) {
        throw ConfigError("step lies outside the schedule");
    }
    // Cycle position scaled by n_cycles keeps the arithmetic integral, so
    // cycle starts and the ramp midpoint come out exact.
    const std::size_t scaled = (step * n_cycles) % total_steps;
    if (2 * scaled >= total_steps) {
        return max_beta;
    }
    // Ratio first: the quotient is exact at the representable probe points
    // (0 at cycle starts, 0.5 mid-ramp), so those betas come out exact.
    return max_beta * ((2.0 * static_cast<double>(scaled)) / static_cast<double>(total_steps));
}

LossBreakdown sentence_loss_from_pooled(const LmVae& model, const FactorSentence& sentence,
                                        const Tensor& pooled, const std::vector<double>& epsilon,
                                        double beta, double target_kl) {
    auto [mu, log_var] = model.project(pooled);
    const LatentCode code = reparameterize(mu, log_var, epsilon);
    const std::size_t d = model.config().injector.latent_dim;

    const Tensor kl = kl_divergence(code.mu, code.log_var);
    const Tensor kl_floored = max_floor(kl, target_kl / static_cast<double>(d));
    const Tensor kl_sum = sum(kl);
    const Tensor kl_floored_sum = sum(kl_floored);

    // Every position predicts its successor; the final token has none, so
    // its row is masked out (target slot holds a pad placeholder).
    const Tensor logits = model.reconstruction_logits(sentence.tokens, code.z);
    const std::size_t t = sentence.tokens.size();
    std::vector<int> targets(t, model.config().decoder.pad_id);
    std::vector<std::uint8_t> mask(t, 1);
    for (std::size_t i = 0; i + 1 < t; ++i) {
        targets[i] = sentence.tokens[i + 1];
    }
    mask[t - 1] = 0;
    const Tensor nll = cross_entropy(logits, targets, mask);

    LossBreakdown out;
    out.total = add(nll, scale(kl_floored_sum, beta));
    out.recon_nll = nll.item();
    out.kl_raw = kl_sum.item();
    out.kl_thresholded = kl_floored_sum.item();
    out.beta = beta;
    return out;
}

LossBreakdown sentence_loss(const LmVae& model, const FactorSentence& sentence,
                            const std::vector<double>& epsilon, double beta, double target_kl) {
    const std::vector<std::uint8_t> mask(sentence.tokens.size(), 1);
    const EncoderOutput enc = model.encoder().encode(sentence.tokens, mask);
    Tensor pooled;
    if (model.config().n_annotation_classes > 0) {
        const Tensor annot = annotation_matrix(sentence);
        pooled = model.pool_sentence(enc, &annot);
    } else {
        pooled = model.pool_sentence(enc, nullptr);
    }
    return sentence_loss_from_pooled(model, sentence, pooled, epsilon, beta, target_kl);
}

void write_metric_log(const std::string& path, const std::vector<StepMetrics>& log) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    out << "step,beta,recon_nll,kl_raw,kl_thresholded,total\n";
    out << std::setprecision(17);
    for (const StepMetrics& m : log) {
        out << m.step << ',' << m.beta << ',' << m.recon_nll << ',' << m.kl_raw << ','
            << m.kl_thresholded << ',' << m.total << '\n';
    }
}

namespace {

std::size_t lm_param_count(const LmConfig& c, bool causal) {
    const std::size_t d = c.d_model;
    // Embeddings, then per block: two layernorms, four attention maps, and
    // the 4x MLP with biases, then the final layernorm (and tied-free head
    // for causal models).
    std::size_t n = c.vocab_size * d + c.max_len * d;
    n += c.n_layers * (12 * d * d + 9 * d);
    n += 2 * d;
    if (causal) {
        n += d * c.vocab_size;
    }
    return n;
}

}  // namespace

ParamCount count_parameters(const LmVae& model) {
    ParamCount pc;
    for (const NamedParam& p : model.named_params()) {
        pc.total += p.tensor.numel();
        if (p.tensor.requires_grad()) {
            pc.trainable += p.tensor.numel();
        }
    }
    pc.ratio = static_cast<double>(pc.trainable) / static_cast<double>(pc.total);
    return pc;
}

ParamCount count_parameters(const VaeConfig& cfg, bool freeze_base) {
    const std::size_t base =
        lm_param_count(cfg.encoder, false) + lm_param_count(cfg.decoder, true);
    const std::size_t in_dim = cfg.encoder.d_model + cfg.n_annotation_classes;
    const std::size_t proj = (in_dim + 1) * 2 * cfg.injector.latent_dim;
    const std::size_t w_m = cfg.injector.latent_dim * cfg.injector.payload_cols();
    ParamCount pc;
    pc.total = base + proj + w_m;
    pc.trainable = freeze_base ? proj + w_m : pc.total;
    pc.ratio = static_cast<double>(pc.trainable) / static_cast<double>(pc.total);
    return pc;
}

AdamOptimizer::AdamOptimizer(std::vector<NamedParam> params, double learning_rate, double beta1,
                             double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2),
      eps_(epsilon) {
    if (!(lr_ > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const NamedParam& p : params_) {
        if (!p.tensor.requires_grad()) {
            throw ConfigError("optimizer parameter '" + p.name + "' is frozen");
        }
        m_.push_back(Tensor::zeros(p.tensor.shape()));
        v_.push_back(Tensor::zeros(p.tensor.shape()));
    }
}

void AdamOptimizer::zero_grad() const {
    for (const NamedParam& p : params_) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor p = params_[i].tensor;
        if (!p.has_grad()) {
            continue;  // parameter untouched by this step's graph
        }
        const std::vector<double>& g = p.grad();
        std::vector<double>& m = m_[i].mutable_value();
        std::vector<double>& v = v_[i].mutable_value();
        std::vector<double>& w = p.mutable_value();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

std::vector<NamedParam> AdamOptimizer::moments() const {
    std::vector<NamedParam> out;
    out.reserve(2 * params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam.m." + params_[i].name, m_[i]});
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam.v." + params_[i].name, v_[i]});
    }
    return out;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_u64_le(std::string& out, std::uint64_t x) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
    }
}

std::uint64_t read_u64_le(const std::string& data, std::size_t offset) {
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) {
        x |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[offset + i])) << (8 * i);
    }
    return x;
}

json lm_to_json(const LmConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
                {"n_layers", c.n_layers},     {"max_len", c.max_len},   {"pad_id", c.pad_id},
                {"bos_id", c.bos_id},         {"eos_id", c.eos_id}};
}

LmConfig lm_from_json(const json& j) {
    LmConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.pad_id = j.at("pad_id").get<int>();
    c.bos_id = j.at("bos_id").get<int>();
    c.eos_id = j.at("eos_id").get<int>();
    return c;
}

std::string pooling_name(PoolingMode m) {
    switch (m) {
        case PoolingMode::mean: return "mean";
        case PoolingMode::last_hidden: return "last_hidden";
        case PoolingMode::cls: return "cls";
    }
    throw ConfigError("unknown pooling mode");
}

PoolingMode pooling_from_name(const std::string& s) {
    if (s == "mean") return PoolingMode::mean;
    if (s == "last_hidden") return PoolingMode::last_hidden;
    if (s == "cls") return PoolingMode::cls;
    throw std::runtime_error("unknown pooling mode '" + s + "'");
}

std::string placement_name(Placement p) {
    return p == Placement::prefix ? "prefix" : "interleave";
}

Placement placement_from_name(const std::string& s) {
    if (s == "prefix") return Placement::prefix;
    if (s == "interleave") return Placement::interleave;
    throw std::runtime_error("unknown placement '" + s + "'");
}

json vae_to_json(const VaeConfig& c) {
    return json{{"encoder", lm_to_json(c.encoder)},
                {"decoder", lm_to_json(c.decoder)},
                {"injector",
                 {{"latent_dim", c.injector.latent_dim},
                  {"n_injected", c.injector.n_injected},
                  {"n_layers", c.injector.n_layers},
                  {"d_model", c.injector.d_model}}},
                {"pooling", pooling_name(c.pooling)},
                {"n_annotation_classes", c.n_annotation_classes},
                {"placement", placement_name(c.placement)},
                {"interleave_stride", c.interleave_stride}};
}

VaeConfig vae_from_json(const json& j) {
    VaeConfig c;
    c.encoder = lm_from_json(j.at("encoder"));
    c.decoder = lm_from_json(j.at("decoder"));
    const json& inj = j.at("injector");
    c.injector.latent_dim = inj.at("latent_dim").get<std::size_t>();
    c.injector.n_injected = inj.at("n_injected").get<std::size_t>();
    c.injector.n_layers = inj.at("n_layers").get<std::size_t>();
    c.injector.d_model = inj.at("d_model").get<std::size_t>();
    c.pooling = pooling_from_name(j.at("pooling").get<std::string>());
    c.n_annotation_classes = j.at("n_annotation_classes").get<std::size_t>();
    c.placement = placement_from_name(j.at("placement").get<std::string>());
    c.interleave_stride = j.at("interleave_stride").get<std::size_t>();
    return c;
}

json train_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"latent_dim", c.latent_dim},
                {"max_beta", c.max_beta},
                {"target_kl", c.target_kl},
                {"n_cycles", c.n_cycles},
                {"freeze_base", c.freeze_base},
                {"seed", c.seed}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.max_beta = j.at("max_beta").get<double>();
    c.target_kl = j.at("target_kl").get<double>();
    c.n_cycles = j.at("n_cycles").get<std::size_t>();
    c.freeze_base = j.at("freeze_base").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    json manifest = json::array();
    std::size_t offset = 0;
    for (const NamedParam& t : ck.tensors) {
        manifest.push_back(
            {{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
        offset += 8 * t.tensor.numel();
    }
    json header{{"format_version", kCheckpointVersion},
                {"model", vae_to_json(ck.model_cfg)},
                {"train", train_to_json(ck.train_cfg)},
                {"tokenizer_vocab", ck.vocab},
                {"step", ck.step},
                {"rng_state", ck.rng_state},
                {"tensors", manifest}};
    const std::string header_text = header.dump();

    std::string blob = "LVF1";
    write_u64_le(blob, header_text.size());
    blob += header_text;
    blob.reserve(blob.size() + offset);
    for (const NamedParam& t : ck.tensors) {
        for (double d : t.tensor.value()) {
            write_u64_le(blob, std::bit_cast<std::uint64_t>(d));
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) {
        throw std::runtime_error("short write to '" + path + "'");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "' for reading");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string data = buf.str();

    if (data.size() < 12 || data.compare(0, 4, "LVF1") != 0) {
        throw std::runtime_error("'" + path + "' is not an LVF1 checkpoint");
    }
    const std::uint64_t header_len = read_u64_le(data, 4);
    if (12 + header_len > data.size()) {
        throw std::runtime_error("checkpoint header is truncated");
    }
    json header;
    try {
        header = json::parse(data.substr(12, header_len));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("checkpoint header is corrupt: ") + e.what());
    }
    if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint format version");
    }

    Checkpoint ck;
    ck.model_cfg = vae_from_json(header.at("model"));
    ck.train_cfg = train_from_json(header.at("train"));
    ck.vocab = header.at("tokenizer_vocab").get<std::vector<std::string>>();
    ck.step = header.at("step").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();

    const std::size_t payload_base = 12 + header_len;
    const std::size_t payload_size = data.size() - payload_base;
    for (const json& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        Tensor t = Tensor::zeros(shape);
        const std::size_t bytes = 8 * t.numel();
        if (offset + bytes > payload_size) {
            throw std::runtime_error("checkpoint payload is truncated at tensor '" + name + "'");
        }
        std::vector<double>& vals = t.mutable_value();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            vals[i] = std::bit_cast<double>(read_u64_le(data, payload_base + offset + 8 * i));
        }
        ck.tensors.push_back({name, t});
    }
    return ck;
}

void restore_model(const LmVae& model, const Checkpoint& ck) {
    std::unordered_map<std::string, const Tensor*> stored;
    for (const NamedParam& t : ck.tensors) {
        stored.emplace(t.name, &t.tensor);
    }
    std::set<std::string> consumed;
    for (NamedParam& p : model.named_params()) {
        auto it = stored.find(p.name);
        if (it == stored.end()) {
            throw ConfigError("checkpoint is missing tensor '" + p.name + "'");
        }
        if (it->second->shape() != p.tensor.shape()) {
            throw ConfigError("checkpoint tensor '" + p.name + "' has a mismatched shape");
        }
        p.tensor.mutable_value() = it->second->value();
        consumed.insert(p.name);
    }
    for (const NamedParam& t : ck.tensors) {
        if (t.name.rfind("adam.", 0) == 0) {
            continue;  // optimizer state, restored by the trainer
        }
        if (!consumed.count(t.name)) {
            throw ConfigError("checkpoint tensor '" + t.name + "' does not map to the model");
        }
    }
}

LmVae model_from_checkpoint(const Checkpoint& ck) {
    Rng rng(0);  // initialization is overwritten wholesale below
    LmVae model(ck.model_cfg, rng);
    restore_model(model, ck);
    return model;
}

Trainer::Trainer(const LmVae& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(validated(cfg)),
      rng_(cfg_.seed),
      opt_(trainable_params(model, cfg_.freeze_base), cfg_.learning_rate) {
    if (cfg_.latent_dim != model.config().injector.latent_dim) {
        throw ConfigError("train latent_dim disagrees with the model's injector");
    }
}

Tensor Trainer::pooled_input(const FactorSentence& sentence) {
    if (cfg_.freeze_base) {
        auto it = pooled_cache_.find(sentence.text);
        if (it != pooled_cache_.end()) {
            return it->second;
        }
    }
    const std::vector<std::uint8_t> mask(sentence.tokens.size(), 1);
    const EncoderOutput enc = model_.encoder().encode(sentence.tokens, mask);
    Tensor pooled;
    if (model_.config().n_annotation_classes > 0) {
        const Tensor annot = annotation_matrix(sentence);
        pooled = model_.pool_sentence(enc, &annot);
    } else {
        pooled = model_.pool_sentence(enc, nullptr);
    }
    if (cfg_.freeze_base) {
        pooled_cache_.emplace(sentence.text, pooled);
    }
    return pooled;
}

LossBreakdown Trainer::batch_loss(const std::vector<const FactorSentence*>& batch, double beta) {
    if (batch.empty()) {
        throw ConfigError("batch must hold at least one sentence");
    }
    Tensor total;
    bool first = true;
    LossBreakdown acc;
    for (const FactorSentence* s : batch) {
        std::vector<double> eps(cfg_.latent_dim);
        for (double& e : eps) {
            e = rng_.normal();
        }
        const LossBreakdown lb =
            sentence_loss_from_pooled(model_, *s, pooled_input(*s), eps, beta, cfg_.target_kl);
        total = first ? lb.total : add(total, lb.total);
        first = false;
        acc.recon_nll += lb.recon_nll;
        acc.kl_raw += lb.kl_raw;
        acc.kl_thresholded += lb.kl_thresholded;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    acc.total = scale(total, inv);
    acc.recon_nll *= inv;
    acc.kl_raw *= inv;
    acc.kl_thresholded *= inv;
    acc.beta = beta;
    return acc;
}

void Trainer::run(const std::vector<FactorSentence>& dataset, std::size_t n_epochs) {
    if (dataset.empty()) {
        throw ConfigError("dataset must not be empty");
    }
    const std::size_t n = dataset.size();
    const std::size_t n_batches = (n + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t total_steps = cfg_.epochs * n_batches;

    if (cfg_.freeze_base) {
        // Exact precompute: frozen encoder weights cannot drift afterwards.
        for (const FactorSentence& s : dataset) {
            pooled_input(s);
        }
    }

    for (std::size_t epoch = 0; epoch < n_epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng_.shuffle(order);
        for (std::size_t b = 0; b < n_batches; ++b) {
            const double beta = beta_schedule(step_, total_steps, cfg_.n_cycles, cfg_.max_beta);
            std::vector<const FactorSentence*> batch;
            const std::size_t hi = std::min(n, (b + 1) * cfg_.batch_size);
            for (std::size_t i = b * cfg_.batch_size; i < hi; ++i) {
                batch.push_back(&dataset[order[i]]);
            }
            opt_.zero_grad();
            LossBreakdown lb;
            {
                Tape tape;
                lb = batch_loss(batch, beta);
                tape.backward(lb.total);
            }
            opt_.step();
            log_.push_back(
                {step_, beta, lb.recon_nll, lb.kl_raw, lb.kl_thresholded, lb.total.item()});
            ++step_;
        }
    }
}

Checkpoint Trainer::make_checkpoint(const Tokenizer& tokenizer) const {
    Checkpoint ck;
    ck.model_cfg = model_.config();
    ck.train_cfg = cfg_;
    ck.vocab = tokenizer.vocab();
    ck.step = step_;
    ck.rng_state = rng_.serialize();
    for (const NamedParam& p : model_.named_params()) {
        ck.tensors.push_back({p.name, p.tensor.clone()});
    }
    for (const NamedParam& m : opt_.moments()) {
        ck.tensors.push_back({m.name, m.tensor.clone()});
    }
    return ck;
}

void Trainer::restore(const Checkpoint& ck) {
    restore_model(model_, ck);
    std::unordered_map<std::string, const Tensor*> stored;
    for (const NamedParam& t : ck.tensors) {
        stored.emplace(t.name, &t.tensor);
    }
    for (NamedParam& m : opt_.moments()) {
        auto it = stored.find(m.name);
        if (it == stored.end()) {
            throw ConfigError("checkpoint lacks optimizer state '" + m.name + "'");
        }
        if (it->second->shape() != m.tensor.shape()) {
            throw ConfigError("optimizer state '" + m.name + "' has a mismatched shape");
        }
        m.tensor.mutable_value() = it->second->value();
    }
    opt_.set_step_count(ck.step);
    step_ = ck.step;
    rng_ = Rng::deserialize(ck.rng_state);
    pooled_cache_.clear();
}

}  // namespace lf
