#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "latentforge/bottleneck.hpp"

using lf::CacheInjector;
using lf::EncoderOutput;
using lf::InjectorConfig;
using lf::KvCache;
using lf::LatentCode;
using lf::LmConfig;
using lf::LmVae;
using lf::Placement;
using lf::PoolingMode;
using lf::Provenance;
using lf::Rng;
using lf::Tensor;
using lf::TransformerLm;
using lf::VaeConfig;

namespace {

EncoderOutput fake_encoding(const Tensor& hidden, std::vector<std::uint8_t> mask) {
    EncoderOutput enc;
    enc.hidden_states = hidden;
    enc.cls_state = lf::slice_rows(hidden, 0, 1);
    std::size_t last = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) {
            last = i;
        }
    }
    enc.last_state = lf::slice_rows(hidden, last, last + 1);
    enc.attention_mask = std::move(mask);
    return enc;
}

VaeConfig tiny_vae_config() {
    VaeConfig cfg;
    cfg.encoder.vocab_size = 11;
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.n_layers = 2;
    cfg.encoder.max_len = 8;
    cfg.decoder = cfg.encoder;
    cfg.injector.latent_dim = 4;
    cfg.injector.n_injected = 2;
    cfg.injector.n_layers = 2;
    cfg.injector.d_model = 8;
    return cfg;
}

// Simpson integration of the Gaussian KL integrand, the independent check
// for the closed form.
double kl_quadrature(double mu, double sigma) {
    const double lo = std::min(mu - 15.0 * sigma, -15.0);
    const double hi = std::max(mu + 15.0 * sigma, 15.0);
    const std::size_t n = 40000;  // even
    const double h = (hi - lo) / static_cast<double>(n);
    auto f = [&](double x) {
        const double q = std::exp(-0.5 * (x - mu) * (x - mu) / (sigma * sigma)) /
                         (sigma * std::sqrt(2.0 * M_PI));
        const double log_ratio =
            -std::log(sigma) - 0.5 * (x - mu) * (x - mu) / (sigma * sigma) + 0.5 * x * x;
        return q * log_ratio;
    };
    double acc = f(lo) + f(hi);
    for (std::size_t i = 1; i < n; ++i) {
        acc += f(lo + h * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
    }
    return acc * h / 3.0;
}

}  // namespace

TEST_CASE("mean pooling arithmetic and mask handling") {
    Tensor hidden = Tensor::from({1, 1, 3, 3}, {2, 2});
    auto enc = fake_encoding(hidden, {1, 1});
    Tensor m = lf::pool(enc, PoolingMode::mean);
    CHECK(m.at(0, 0) == doctest::Approx(2.0));
    CHECK(m.at(0, 1) == doctest::Approx(2.0));

    auto masked = fake_encoding(hidden, {1, 0});
    Tensor m2 = lf::pool(masked, PoolingMode::mean);
    CHECK(m2.at(0, 0) == doctest::Approx(1.0));

    auto dead = fake_encoding(hidden, {0, 0});
    CHECK_THROWS_AS(lf::pool(dead, PoolingMode::mean), lf::ConfigError);
}

TEST_CASE("all pooling modes agree on a single token") {
    Tensor hidden = Tensor::from({0.5, -2.0, 3.5}, {1, 3});
    auto enc = fake_encoding(hidden, {1});
    for (auto mode : {PoolingMode::mean, PoolingMode::last_hidden, PoolingMode::cls}) {
        Tensor p = lf::pool(enc, mode);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(p.at(0, j) == hidden.at(0, j));
        }
    }
}

TEST_CASE("mean pooling is permutation-invariant over unmasked positions") {
    Rng rng(3);
    Tensor hidden = Tensor::randn({4, 3}, rng, 1.0);
    auto enc = fake_encoding(hidden, {1, 1, 1, 1});
    Tensor base = lf::pool(enc, PoolingMode::mean);

    std::vector<double> perm(hidden.value());
    for (std::size_t j = 0; j < 3; ++j) {  // swap rows 0 and 2
        std::swap(perm[0 * 3 + j], perm[2 * 3 + j]);
    }
    auto shuffled = fake_encoding(Tensor::from(perm, {4, 3}), {1, 1, 1, 1});
    Tensor moved = lf::pool(shuffled, PoolingMode::mean);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(base.at(0, j) == doctest::Approx(moved.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("annotation pooling") {
    // All tokens labeled class 2 of 4.
    Tensor all2 = Tensor::from({0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0}, {3, 4});
    Tensor p = lf::pool_annotations(all2, {1, 1, 1});
    CHECK(p.at(0, 2) == doctest::Approx(1.0));
    CHECK(p.at(0, 0) == doctest::Approx(0.0));

    // Half class 0, half class 1.
    Tensor half = Tensor::from({1, 0, 0, 0, 0, 1, 0, 0}, {2, 4});
    Tensor ph = lf::pool_annotations(half, {1, 1});
    CHECK(ph.at(0, 0) == doctest::Approx(0.5));
    CHECK(ph.at(0, 1) == doctest::Approx(0.5));

    // Unannotated rows stay a valid zero vector.
    Tensor zeroed = Tensor::zeros({2, 4});
    Tensor pz = lf::pool_annotations(zeroed, {1, 1});
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(pz.at(0, j) == 0.0);
    }

    Tensor twohot = Tensor::from({1, 1, 0, 0}, {1, 4});
    CHECK_THROWS_AS(lf::pool_annotations(twohot, {1}), lf::ConfigError);
}

TEST_CASE("projection: zero weights give the unit prior") {
    Rng rng(5);
    LmVae vae(tiny_vae_config(), rng);
    for (const auto& p : vae.bottleneck_params()) {
        if (p.name == "proj.w" || p.name == "proj.b") {
            Tensor t = p.tensor;
            std::fill(t.mutable_value().begin(), t.mutable_value().end(), 0.0);
        }
    }
    Tensor pooled = Tensor::randn({1, 8}, rng, 1.0);
    auto [mu, log_var] = vae.project(pooled);
    CHECK(mu.cols() == 4);
    CHECK(log_var.cols() == 4);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(mu.at(0, j) == 0.0);
        CHECK(log_var.at(0, j) == 0.0);
    }
    CHECK_THROWS_AS(vae.project(Tensor::zeros({1, 5})), lf::ConfigError);
}

TEST_CASE("reparameterize: deterministic mode, unit noise, recorded epsilon") {
    Tensor mu = Tensor::from({0.3, -1.2}, {1, 2});
    Tensor lv = Tensor::zeros({1, 2});

    LatentCode det = lf::reparameterize(mu, lv, nullptr);
    CHECK(det.z.value() == mu.value());
    CHECK(det.epsilon == std::vector<double>{0.0, 0.0});

    LatentCode unit = lf::reparameterize(mu, lv, std::vector<double>{1.0, 1.0});
    CHECK(unit.z.at(0, 0) == doctest::Approx(1.3).epsilon(1e-12));
    CHECK(unit.z.at(0, 1) == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(unit.epsilon == std::vector<double>{1.0, 1.0});
}

TEST_CASE("reparameterize sample mean approaches mu") {
    const double mu0 = 0.7, mu1 = -1.3, lv0 = 0.4, lv1 = -0.8;
    Tensor mu = Tensor::from({mu0, mu1}, {1, 2});
    Tensor lv = Tensor::from({lv0, lv1}, {1, 2});
    Rng rng(17);
    const std::size_t n = 100000;
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        LatentCode code = lf::reparameterize(mu, lv, &rng);
        s0 += code.z.at(0, 0);
        s1 += code.z.at(0, 1);
    }
    const double sd0 = std::exp(0.5 * lv0), sd1 = std::exp(0.5 * lv1);
    const double band = 3.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(s0 / n - mu0) < band * sd0);
    CHECK(std::fabs(s1 / n - mu1) < band * sd1);
}

TEST_CASE("kl divergence analytic values") {
    Tensor zero = Tensor::zeros({1, 3});
    Tensor kl0 = lf::kl_divergence(zero, zero);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(kl0.at(0, j) == 0.0);
    }
    Tensor mu1 = Tensor::full({1, 3}, 1.0);
    Tensor kl1 = lf::kl_divergence(mu1, Tensor::zeros({1, 3}));
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(kl1.at(0, j) == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("kl divergence matches Gaussian quadrature") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        const double mu = rng.uniform(-2.0, 2.0);
        const double lv = rng.uniform(-2.0, 2.0);
        Tensor kl = lf::kl_divergence(Tensor::from({mu}, {1, 1}), Tensor::from({lv}, {1, 1}));
        const double oracle = kl_quadrature(mu, std::exp(0.5 * lv));
        CHECK(std::fabs(kl.at(0, 0) - oracle) / std::max(oracle, 1e-3) < 1e-3);
    }
}

TEST_CASE("kl divergence is non-negative over the clamped domain") {
    Rng rng(29);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor mu = Tensor::from({rng.uniform(-5.0, 5.0)}, {1, 1});
        Tensor lv = Tensor::from({rng.uniform(-10.0, 10.0)}, {1, 1});
        CHECK(lf::kl_divergence(mu, lv).at(0, 0) >= 0.0);
    }
}

TEST_CASE("inject with S=0 leaves decoding untouched") {
    Rng rng(31);
    LmConfig dcfg = tiny_vae_config().decoder;
    TransformerLm dec(dcfg, true, rng);
    InjectorConfig icfg = tiny_vae_config().injector;
    icfg.n_injected = 0;
    CacheInjector injector(icfg, rng);
    Tensor z = Tensor::randn({1, 4}, rng, 1.0);

    KvCache cache = injector.inject(z);
    CHECK(cache.layer(0).size() == 0);
    CHECK(cache.pool_size() == 0);

    auto generated = lf::generate(dec, injector, z, 6);
    // Plain greedy loop without any injected context.
    std::vector<int> plain;
    KvCache fresh = dec.make_cache();
    int token = dcfg.bos_id;
    while (plain.size() < 6) {
        Tensor logits = dec.decode_step(token, fresh);
        int best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits.at(0, j) > logits.at(0, best)) {
                best = static_cast<int>(j);
            }
        }
        if (best == dcfg.eos_id) {
            break;
        }
        plain.push_back(best);
        token = best;
    }
    CHECK(generated == plain);
}

TEST_CASE("inject reshape round-trip recovers W_m z") {
    Rng rng(37);
    InjectorConfig icfg;
    icfg.latent_dim = 4;
    icfg.n_injected = 3;
    icfg.n_layers = 2;
    icfg.d_model = 8;
    CacheInjector injector(icfg, rng);
    Tensor z = Tensor::randn({1, 4}, rng, 1.0);
    KvCache cache = injector.inject(z);

    // Flatten live entries in [layer, entry, key||value] order.
    std::vector<double> flat;
    for (std::size_t l = 0; l < 2; ++l) {
        REQUIRE(cache.layer(l).size() == 3);
        for (std::size_t e = 0; e < 3; ++e) {
            for (std::size_t j = 0; j < 8; ++j) {
                flat.push_back(cache.layer(l).keys.at(e, j));
            }
            for (std::size_t j = 0; j < 8; ++j) {
                flat.push_back(cache.layer(l).values.at(e, j));
            }
        }
    }
    // Independent product against the horizontally concatenated W_m blocks.
    Tensor wide;
    for (const auto& p : injector.named_params()) {
        wide = wide.defined() ? lf::concat_cols(wide, p.tensor) : p.tensor;
    }
    Tensor direct = lf::matmul(z, wide);
    REQUIRE(direct.numel() == flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) {
        CHECK(flat[i] == direct.at(i));
    }

    CHECK_THROWS_AS(injector.inject(Tensor::zeros({1, 5})), lf::ConfigError);
}

TEST_CASE("zeroed W_m yields zero-value injected entries that absorb mass only") {
    Rng rng(41);
    LmConfig dcfg = tiny_vae_config().decoder;
    TransformerLm dec(dcfg, true, rng);
    InjectorConfig icfg = tiny_vae_config().injector;
    CacheInjector injector(icfg, rng);
    for (const auto& p : injector.named_params()) {
        Tensor t = p.tensor;
        std::fill(t.mutable_value().begin(), t.mutable_value().end(), 0.0);
    }
    Tensor z = Tensor::randn({1, 4}, rng, 1.0);
    KvCache cache = injector.inject(z);
    for (std::size_t l = 0; l < 2; ++l) {
        for (double v : cache.layer(l).keys.value()) {
            CHECK(v == 0.0);
        }
        for (double v : cache.layer(l).values.value()) {
            CHECK(v == 0.0);
        }
    }

    // Attention still spends probability mass on the zero-key entries, so
    // logits shift relative to plain decoding while the injected value
    // contribution stays exactly zero.
    lf::AttentionTrace trace;
    Tensor with_inj = dec.decode_step(3, cache, &trace);
    KvCache fresh = dec.make_cache();
    Tensor plain = dec.decode_step(3, fresh);
    double injected_mass = 0.0;
    for (const auto& head : trace.weights[0]) {
        injected_mass += head[0] + head[1];
    }
    CHECK(injected_mass > 0.0);
    double diff = 0.0;
    for (std::size_t j = 0; j < with_inj.cols(); ++j) {
        diff = std::max(diff, std::fabs(with_inj.at(0, j) - plain.at(0, j)));
    }
    CHECK(diff > 0.0);
}

TEST_CASE("masked-off injected copies cannot move logits") {
    Rng rng(43);
    LmConfig dcfg = tiny_vae_config().decoder;
    TransformerLm dec(dcfg, true, rng);
    InjectorConfig icfg = tiny_vae_config().injector;
    CacheInjector injector(icfg, rng);
    injector.placement = Placement::interleave;
    injector.interleave_stride = 2;
    Tensor z = Tensor::randn({1, 4}, rng, 1.0);

    std::vector<int> tokens = {1, 4, 9, 2, 7};
    KvCache staged = injector.inject(z);
    Tensor interleaved = dec.full_forward(tokens, &staged);
    Tensor plain = dec.full_forward(tokens);
    // Queries 0 and 1 precede the first splice: bitwise equal to no injection.
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 11; ++j) {
            CHECK(interleaved.at(i, j) == plain.at(i, j));
        }
    }
    // Query 2 sees the first injected copy.
    double diff = 0.0;
    for (std::size_t j = 0; j < 11; ++j) {
        diff = std::max(diff, std::fabs(interleaved.at(2, j) - plain.at(2, j)));
    }
    CHECK(diff > 0.0);
}

TEST_CASE("generate: empty budget, determinism, eos handling") {
    Rng rng(47);
    VaeConfig cfg = tiny_vae_config();
    LmVae vae(cfg, rng);
    Tensor z = Tensor::randn({1, 4}, rng, 1.0);
    CHECK(vae.generate(z, 0).empty());
    auto a = vae.generate(z, 6);
    auto b = vae.generate(z, 6);
    CHECK(a == b);
    CHECK(a.size() <= 6);
    for (int t : a) {
        CHECK(t != cfg.decoder.eos_id);
    }
}

TEST_CASE("bottleneck trainable set is exactly projection plus W_m") {
    Rng rng(53);
    LmVae vae(tiny_vae_config(), rng);
    std::vector<std::string> names;
    for (const auto& p : vae.bottleneck_params()) {
        names.push_back(p.name);
    }
    std::vector<std::string> expected = {"proj.w", "proj.b", "inject.w_m.layer0",
                                         "inject.w_m.layer1"};
    CHECK(names == expected);

    vae.freeze_base(true);
    for (const auto& p : vae.named_params()) {
        const bool is_bottleneck =
            std::find(expected.begin(), expected.end(), p.name) != expected.end();
        CHECK(p.tensor.requires_grad() == is_bottleneck);
    }
}

TEST_CASE("KL gradient w.r.t. projection weights matches finite differences") {
    Rng rng(59);
    VaeConfig cfg = tiny_vae_config();
    LmVae vae(cfg, rng);
    vae.freeze_base(true);
    std::vector<int> tokens = {1, 4, 9, 2};
    std::vector<std::uint8_t> mask = {1, 1, 1, 1};

    std::vector<Tensor> params;
    for (const auto& p : vae.bottleneck_params()) {
        if (p.name == "proj.w" || p.name == "proj.b") {
            params.push_back(p.tensor);
        }
    }
    auto fn = [&] {
        auto enc = vae.encoder().encode(tokens, mask);
        auto [mu, log_var] = vae.project(vae.pool_sentence(enc, nullptr));
        return lf::sum(lf::kl_divergence(mu, log_var));
    };
    auto res = lf::testing::grad_check(params, fn);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("reconstruction loss gradients reach projection and W_m") {
    Rng rng(61);
    VaeConfig cfg = tiny_vae_config();
    LmVae vae(cfg, rng);
    vae.freeze_base(true);
    std::vector<int> tokens = {1, 4, 9, 2};
    std::vector<std::uint8_t> mask = {1, 1, 1, 1};
    std::vector<int> targets = {4, 9, 2, 2};
    std::vector<double> eps = {0.3, -0.8, 1.1, 0.2};

    std::vector<Tensor> params;
    for (const auto& p : vae.bottleneck_params()) {
        params.push_back(p.tensor);
    }
    auto fn = [&] {
        LatentCode code = vae.encode_latent(tokens, mask, nullptr, nullptr);
        LatentCode noisy = lf::reparameterize(code.mu, code.log_var, eps);
        Tensor logits = vae.reconstruction_logits(tokens, noisy.z);
        return lf::add(lf::cross_entropy(logits, targets, mask),
                       lf::sum(lf::kl_divergence(noisy.mu, noisy.log_var)));
    };
    auto res = lf::testing::grad_check(params, fn);
    INFO("worst " << res.worst);
    CHECK(res.max_rel_err < 1e-4);
}
