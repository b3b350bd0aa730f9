// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "dualrate/models.hpp"
#include "dualrate/train.hpp"
#include "test_support.hpp"

using namespace dualrate;
using testsupport::rel_err;

namespace {
const LogSnrSchedule kSched = LogSnrSchedule::cosine(-12.0, 12.0);

ModelSettings small_settings() {
    ModelSettings s;
    s.data_dim = 2;
    s.encoder_hidden = {5, 4};
    s.denoiser_hidden = {3};
    s.time_embed_dim = 4;
    s.n_classes = 2;
    return s;
}

bool has_tensor(const DualRateModel& m, const std::string& name) {
    for (const auto& [n, sl] : m.params.layout)
        if (n == name) return true;
    return false;
}
}  // namespace

TEST_CASE("model assembly wires encoder features into the denoiser") {
    ModelSettings s;
    s.data_dim = 2;
    s.encoder_hidden = {8, 6, 5};
    s.denoiser_hidden = {4, 3};
    s.time_embed_dim = 4;
    s.n_classes = 3;
    Rng rng(601);
    DualRateModel m = DualRateModel::create(s, rng);

    // Multi-level: the denoiser's layers listen to the last encoder layers.
    REQUIRE(m.denoiser_spec.cond_dims == std::vector<int>{6, 5});
    REQUIRE(m.feature_layers() == std::vector<int>{1, 2});
    REQUIRE(m.denoiser_spec.n_embed_inputs == 2);
    REQUIRE(m.encoder_spec.n_embed_inputs == 1);
    REQUIRE(m.enc_len == param_count(m.encoder_spec));
    REQUIRE(m.den_len == param_count(m.denoiser_spec));
    REQUIRE(m.params.size() == m.enc_len + m.den_len);
    REQUIRE(has_tensor(m, "enc.W0"));
    REQUIRE(has_tensor(m, "den.W0"));
    REQUIRE(has_tensor(m, "den.class_embed"));
    REQUIRE(m.null_labels(3) == std::vector<int>{3, 3, 3});

    ModelSettings single = s;
    single.multi_level = false;
    DualRateModel m1 = DualRateModel::create(single, rng);
    REQUIRE(m1.denoiser_spec.cond_dims == std::vector<int>{5});
    REQUIRE(m1.feature_layers() == std::vector<int>{2});

    ModelSettings plain = s;
    plain.use_encoder = false;
    plain.embed_drop_p = 0.7;
    DualRateModel m2 = DualRateModel::create(plain, rng);
    REQUIRE(m2.enc_len == 0);
    REQUIRE(m2.denoiser_spec.n_embed_inputs == 1);
    REQUIRE(m2.denoiser_spec.cond_dims.empty());
    REQUIRE(m2.embed_drop_p == 0.0);  // no features to drop

    ModelSettings shallow = s;
    shallow.encoder_hidden = {8};
    REQUIRE_THROWS_AS(DualRateModel::create(shallow, rng), ConfigError);  // fewer levels
    ModelSettings no_den = s;
    no_den.denoiser_hidden = {};
    REQUIRE_THROWS_AS(DualRateModel::create(no_den, rng), ConfigError);
    ModelSettings bad_p = s;
    bad_p.embed_drop_p = 1.2;
    REQUIRE_THROWS_AS(DualRateModel::create(bad_p, rng), ConfigError);
}

TEST_CASE("output reparameterization converts views exactly") {
    SnrPoint pt;
    pt.alpha = 0.6;
    pt.sigma = 0.8;
    Matrix z(1, 1), v(1, 1);
    z.v = {1.0};
    v.v = {0.5};
    Matrix x = v_to_x(z, v, pt);
    REQUIRE(x.v[0] == Catch::Approx(0.2).margin(1e-15));
    Matrix v2 = x_to_v(z, x, pt);
    REQUIRE(v2.v[0] == Catch::Approx(0.5).margin(1e-14));

    Matrix zr(4, 3), vr(4, 3);
    Rng rng(602);
    rng.fill_normal(zr);
    rng.fill_normal(vr);
    SnrPoint mid = kSched.eval(0.37);
    Matrix round = x_to_v(zr, v_to_x(zr, vr, mid), mid);
    for (size_t i = 0; i < vr.v.size(); ++i)
        REQUIRE(round.v[i] == Catch::Approx(vr.v[i]).margin(1e-12));

    SnrPoint clean;
    clean.sigma = 0;
    REQUIRE_THROWS_AS(x_to_v(zr, zr, clean), NumericsError);

    // Gradient chain through the parameterization.
    DualRateModel vm;
    vm.param_mode = ParamMode::VPred;
    Matrix d(1, 1);
    d.v = {3.0};
    REQUIRE(dxhat_to_draw(vm, d, pt).v[0] == Catch::Approx(-2.4).margin(1e-15));
    DualRateModel xm;
    xm.param_mode = ParamMode::XPred;
    REQUIRE(dxhat_to_draw(xm, d, pt).v[0] == 3.0);
}

TEST_CASE("context encoding produces per-level features and honors dropout") {
    Rng rng(603);
    DualRateModel m = DualRateModel::create(small_settings(), rng);
    const int B = 6;
    Matrix z(B, 2);
    rng.fill_normal(z);
    std::vector<int> labels = {0, 1, 2, 0, 1, 2};  // includes the null class

    ContextFeatures f = encode_context(m, m.params.values, z, 0.8, labels);
    REQUIRE(f.tau == 0.8);
    REQUIRE(f.layers.size() == 1);  // one denoiser layer listens
    REQUIRE(f.layers[0].rows == B);
    REQUIRE(f.layers[0].cols == 4);  // last encoder width
    REQUIRE(f.null_mask.empty());
    REQUIRE_FALSE(f.has_tape);

    Rng drop(604);
    ContextFeatures dropped = encode_context(m, m.params.values, z, 0.8, labels, 1.0, &drop);
    REQUIRE(dropped.null_mask == std::vector<uint8_t>(B, 1));
    for (double v : dropped.layers[0].v) REQUIRE(v == 0.0);

    ContextFeatures kept = encode_context(m, m.params.values, z, 0.8, labels, 0.0, &drop);
    REQUIRE(kept.null_mask.empty());
    for (size_t i = 0; i < kept.layers[0].v.size(); ++i)
        REQUIRE(kept.layers[0].v[i] == f.layers[0].v[i]);

    REQUIRE_THROWS_AS(encode_context(m, m.params.values, z, 0.8, labels, 0.5, nullptr),
                      ConfigError);
    REQUIRE_THROWS_AS(encode_context(m, m.params.values, z, 0.8, {}), ConfigError);

    // The no-encoder path returns an empty feature set.
    ModelSettings plain = small_settings();
    plain.use_encoder = false;
    plain.n_classes = 0;
    DualRateModel pm = DualRateModel::create(plain, rng);
    ContextFeatures none = encode_context(pm, pm.params.values, z, 0.8, {});
    REQUIRE(none.layers.empty());
    REQUIRE(none.tau == 0.8);
}

TEST_CASE("denoising rejects stale context and respects the time guard") {
    Rng rng(605);
    DualRateModel m = DualRateModel::create(small_settings(), rng);
    Matrix z(3, 2);
    rng.fill_normal(z);
    std::vector<int> labels = {0, 1, 0};

    ContextFeatures f = encode_context(m, m.params.values, z, 0.4, labels);
    SnrPoint pt_ok = kSched.eval(0.35);
    NoisyState zs{z, pt_ok.t};
    REQUIRE_NOTHROW(denoise(m, m.params.values, zs, pt_ok, f, labels));
    // Equal times are allowed.
    REQUIRE_NOTHROW(denoise(m, m.params.values, zs, kSched.eval(0.4), f, labels));

    SnrPoint pt_late = kSched.eval(0.6);
    REQUIRE_THROWS_AS(denoise(m, m.params.values, zs, pt_late, f, labels), ConfigError);

    Matrix wrong(3, 5);
    NoisyState bad{wrong, pt_ok.t};
    REQUIRE_THROWS_AS(denoise(m, m.params.values, bad, pt_ok, f, labels), ConfigError);
}

TEST_CASE("training objective gradients match central differences end to end") {
    // The full chain: encoder forward, feature dropout, denoiser forward,
    // v-reparameterization, weighted loss, and the hidden-gradient injection
    // back through the encoder.
    struct Case {
        bool use_encoder;
        ParamMode mode;
        double net_drop;
        unsigned long seed;
    };
    const Case cases[] = {
        {true, ParamMode::VPred, 0.0, 701},
        {true, ParamMode::XPred, 0.0, 702},
        {false, ParamMode::VPred, 0.0, 703},
        {true, ParamMode::VPred, 0.25, 704},
    };
    for (const Case& c : cases) {
        CAPTURE(c.use_encoder, int(c.mode), c.net_drop, c.seed);
        ModelSettings s = small_settings();
        s.use_encoder = c.use_encoder;
        s.param_mode = c.mode;
        Rng rng(c.seed);
        DualRateModel model = DualRateModel::create(s, rng);
        for (double& v : model.params.values) v += 0.05 * rng.normal();

        DataBatch batch;
        batch.x = Matrix(3, 2);
        rng.fill_normal(batch.x);
        batch.labels = {0, 2, 1};
        TimePair tp{0.63, 0.55};
        LossWeight w;  // sigmoid, bias 1

        const uint64_t inner = 7000 + c.seed;
        auto loss_at = [&](std::span<const double> p) {
            Rng r(inner);
            return diffusion_loss(model, p, batch, tp, kSched, w, 0.3, 0.4, c.net_drop, r, {})
                .loss;
        };

        std::vector<double> grads(model.params.size(), 0.0);
        Rng r(inner);
        LossResult res =
            diffusion_loss(model, model.params.values, batch, tp, kSched, w, 0.3, 0.4,
                           c.net_drop, r, grads);
        REQUIRE(std::isfinite(res.loss));
        REQUIRE(res.loss == Catch::Approx(loss_at(model.params.values)).margin(1e-12));

        std::vector<double> fd =
            testsupport::central_diff_grad(loss_at, model.params.values, 1e-6);
        REQUIRE(testsupport::max_grad_rel_err(grads, fd) < 1e-5);
    }
}

TEST_CASE("objective scales the squared error by the schedule weight") {
    // With x-prediction and all-zero weights the prediction is exactly zero,
    // so the loss reduces to coef * mean ||x||^2.
    ModelSettings s = small_settings();
    s.use_encoder = false;
    s.n_classes = 0;
    s.param_mode = ParamMode::XPred;
    Rng rng(608);
    DualRateModel model = DualRateModel::create(s, rng);
    std::fill(model.params.values.begin(), model.params.values.end(), 0.0);

    DataBatch batch;
    batch.x = Matrix(4, 2);
    rng.fill_normal(batch.x);
    TimePair tp{0.9, 0.52};
    LossWeight w;

    Rng r(609);
    LossResult res = diffusion_loss(model, model.params.values, batch, tp, kSched, w,
                                    0.0, 0.0, 0.0, r, {});
    double msq = 0;
    for (double v : batch.x.v) msq += v * v;
    msq /= batch.x.v.size();
    SnrPoint pt = kSched.eval(tp.t);
    double coef = -pt.dlambda_dt * std::exp(pt.lambda) * w(pt.lambda);
    REQUIRE(res.mse == Catch::Approx(msq).margin(1e-12));
    REQUIRE(res.weight_coef == Catch::Approx(coef).margin(1e-12));
    REQUIRE(res.loss == Catch::Approx(coef * msq).epsilon(1e-12));
}

TEST_CASE("guidance is inactive at w = 0 or outside the log-SNR gate") {
    Rng rng(610);
    DualRateModel m = DualRateModel::create(small_settings(), rng);
    const int B = 4;
    Matrix z(B, 2);
    rng.fill_normal(z);
    std::vector<int> labels = {0, 1, 0, 1};

    double t_in = kSched.time_of_lambda(2.0);    // inside (1.5, 5)
    double t_out = kSched.time_of_lambda(-1.0);  // below the gate
    for (double t : {t_in, t_out}) {
        SnrPoint pt = kSched.eval(t);
        NoisyState zs{z, pt.t};
        ContextFeatures fc = encode_context(m, m.params.values, z, 1.0, labels);
        ContextFeatures fu =
            encode_context(m, m.params.values, z, 1.0, m.null_labels(B));
        DenoiseEval plain = denoise(m, m.params.values, zs, pt, fc, labels);

        GuidanceConfig off;
        off.w = 0.0;
        Prediction p0 = guided_denoise(m, m.params.values, zs, pt, fc, &fu, labels, off);
        for (size_t i = 0; i < p0.x_hat.v.size(); ++i)
            REQUIRE(p0.x_hat.v[i] == plain.pred.x_hat.v[i]);

        if (t == t_out) {
            GuidanceConfig on;
            on.w = 2.0;
            Prediction p1 = guided_denoise(m, m.params.values, zs, pt, fc, &fu, labels, on);
            for (size_t i = 0; i < p1.x_hat.v.size(); ++i)
                REQUIRE(p1.x_hat.v[i] == plain.pred.x_hat.v[i]);
        }
    }
}

TEST_CASE("active guidance mixes the two branches with the stated weight") {
    Rng rng(611);
    DualRateModel m = DualRateModel::create(small_settings(), rng);
    for (double& v : m.params.values) v += 0.05 * rng.normal();
    const int B = 3;
    Matrix z(B, 2);
    rng.fill_normal(z);
    std::vector<int> labels = {1, 0, 2};

    SnrPoint pt = kSched.eval(kSched.time_of_lambda(3.0));
    NoisyState zs{z, pt.t};
    ContextFeatures fc = encode_context(m, m.params.values, z, 1.0, labels);
    ContextFeatures fu = encode_context(m, m.params.values, z, 1.0, m.null_labels(B));

    GuidanceConfig g;
    g.w = 1.5;
    Prediction got = guided_denoise(m, m.params.values, zs, pt, fc, &fu, labels, g);

    DenoiseEval cond = denoise(m, m.params.values, zs, pt, fc, labels);
    DenoiseEval uncond = denoise(m, m.params.values, zs, pt, fu, m.null_labels(B));
    bool differs = false;
    for (size_t i = 0; i < got.x_hat.v.size(); ++i) {
        double c = cond.pred.x_hat.v[i];
        double u = uncond.pred.x_hat.v[i];
        REQUIRE(got.x_hat.v[i] == Catch::Approx(c + 1.5 * (c - u)).margin(1e-14));
        differs = differs || std::abs(got.x_hat.v[i] - c) > 1e-9;
    }
    REQUIRE(differs);  // the gate really fired

    REQUIRE_THROWS_AS(guided_denoise(m, m.params.values, zs, pt, fc, nullptr, labels, g),
                      ConfigError);

    // Class-free models cannot be guided inside the gate.
    ModelSettings plain = small_settings();
    plain.n_classes = 0;
    DualRateModel pm = DualRateModel::create(plain, rng);
    ContextFeatures pf = encode_context(pm, pm.params.values, z, 1.0, {});
    REQUIRE_THROWS_AS(guided_denoise(pm, pm.params.values, zs, pt, pf, &pf, {}, g),
                      ConfigError);
}

TEST_CASE("mixture posterior mean matches one-dimensional quadrature") {
    GmmSpec g;
    g.means = Matrix(2, 1);
    g.means.v = {-1.0, 0.7};
    g.weights = {0.3, 0.7};
    g.comp_std = 0.4;

    SnrPoint pt = kSched.eval(0.5);
    auto density = [&](double x) {
        double p = 0;
        for (int c = 0; c < 2; ++c) {
            double d = (x - g.means.v[c]) / g.comp_std;
            p += g.weights[c] * std::exp(-0.5 * d * d) /
                 (g.comp_std * std::sqrt(2.0 * M_PI));
        }
        return p;
    };
    for (double zv : {0.25, -0.9, 1.4}) {
        auto numer = [&](double x) {
            double d = (zv - pt.alpha * x) / pt.sigma;
            return x * density(x) * std::exp(-0.5 * d * d);
        };
        auto denom = [&](double x) {
            double d = (zv - pt.alpha * x) / pt.sigma;
            return density(x) * std::exp(-0.5 * d * d);
        };
        double want = testsupport::trapezoid(numer, -5.0, 5.0, 40000) /
                      testsupport::trapezoid(denom, -5.0, 5.0, 40000);

        Matrix z(1, 1);
        z.v = {zv};
        Matrix got = oracle_denoiser(g, z, pt);
        CAPTURE(zv);
        REQUIRE(rel_err(got.v[0], want) < 1e-8);
    }
}

TEST_CASE("label-conditional posterior matches the Gaussian closed form") {
    GmmSpec g = GmmSpec::ring(5, 2.0, 0.3);
    SnrPoint pt = kSched.eval(0.45);
    Matrix z(3, 2);
    Rng rng(612);
    rng.fill_normal(z);
    std::vector<int> labels = {2, 0, 4};

    Matrix got = oracle_denoiser(g, z, pt, labels);
    // Posterior of x ~ N(mu, s^2 I) observed through z = alpha x + sigma eps,
    // in precision form (an independent arrangement of the algebra).
    double s2 = g.comp_std * g.comp_std;
    double post_var = 1.0 / (1.0 / s2 + pt.alpha * pt.alpha / (pt.sigma * pt.sigma));
    for (int i = 0; i < 3; ++i)
        for (int d = 0; d < 2; ++d) {
            double mu = g.means.at(labels[i], d);
            double want =
                post_var * (mu / s2 + pt.alpha * z.at(i, d) / (pt.sigma * pt.sigma));
            REQUIRE(rel_err(got.at(i, d), want, 1e-12) < 1e-12);
        }

    // The null label falls back to the unconditional mixture.
    std::vector<int> nulls = {5, 5, 5};
    Matrix via_null = oracle_denoiser(g, z, pt, nulls);
    Matrix uncond = oracle_denoiser(g, z, pt);
    for (size_t i = 0; i < uncond.v.size(); ++i) REQUIRE(via_null.v[i] == uncond.v[i]);

    std::vector<int> bad = {6, 0, 0};
    REQUIRE_THROWS_AS(oracle_denoiser(g, z, pt, bad), ConfigError);
    std::vector<int> short_list = {0};
    REQUIRE_THROWS_AS(oracle_denoiser(g, z, pt, short_list), ConfigError);
    Matrix wrong(3, 4);
    REQUIRE_THROWS_AS(oracle_denoiser(g, wrong, pt), ConfigError);
}

TEST_CASE("mixture posterior mean has the right low- and high-noise limits") {
    GmmSpec g = GmmSpec::ring(4, 1.5, 0.25);

    // Near-clean data: the posterior mean follows the observation.
    SnrPoint lo = kSched.eval(0.0);  // lambda = 12
    Matrix z(1, 2);
    z.v = {1.45, 0.1};  // near component 0
    Matrix got_lo = oracle_denoiser(g, z, lo);
    REQUIRE(std::abs(got_lo.v[0] - z.v[0] / lo.alpha) < 1e-4);
    REQUIRE(std::abs(got_lo.v[1] - z.v[1] / lo.alpha) < 1e-4);

    // Pure noise: the posterior mean collapses to the mixture mean (0 for a
    // symmetric ring), whatever the observation.
    SnrPoint hi = kSched.eval(1.0);  // lambda = -12
    Matrix zfar(1, 2);
    zfar.v = {3.0, -2.0};
    Matrix got_hi = oracle_denoiser(g, zfar, hi);
    REQUIRE(std::abs(got_hi.v[0]) < 0.01);
    REQUIRE(std::abs(got_hi.v[1]) < 0.01);
}

TEST_CASE("layout rebuilding restores names and zeroed storage") {
    Rng rng(613);
    DualRateModel m = DualRateModel::create(small_settings(), rng);
    size_t n = m.params.size();
    auto names_before = m.params.layout;

    m.params.values.clear();
    m.params.layout.clear();
    m.rebuild_layout();
    REQUIRE(m.params.size() == n);
    for (double v : m.params.values) REQUIRE(v == 0.0);
    REQUIRE(m.params.layout.size() == names_before.size());
    for (size_t i = 0; i < names_before.size(); ++i) {
        REQUIRE(m.params.layout[i].first == names_before[i].first);
        REQUIRE(m.params.layout[i].second.offset == names_before[i].second.offset);
    }
}
