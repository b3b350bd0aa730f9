// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dualrate/checkpoint.hpp"
#include "dualrate/config.hpp"
#include "dualrate/runner.hpp"
#include "dualrate/svg.hpp"

using namespace dualrate;

namespace {
const LogSnrSchedule kSched = LogSnrSchedule::cosine(-12.0, 12.0);

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("dualrate_cfgtest_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void dump(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    REQUIRE(f.good());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(f.good());
}

void append_u32(std::string& s, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    s.append(b, 4);
}

// Assembles a container file from raw header fields, sealing it with the
// same trailing checksum the writer applies. Used to probe reader behavior
// on inputs the writer itself would never produce.
std::string seal_with_crc(std::string body) {
    uint32_t crc = detail::crc32_update(0, body.data(), body.size());
    append_u32(body, crc);
    return body;
}

// Keeps the output-dir environment override from leaking across test cases.
struct EnvGuard {
    EnvGuard() { ::unsetenv("DUALRATE_OUT"); }
    ~EnvGuard() { ::unsetenv("DUALRATE_OUT"); }
};

ModelSettings tiny_dual_model() {
    ModelSettings s;
    s.data_dim = 2;
    s.encoder_hidden = {6, 5};
    s.denoiser_hidden = {4};
    s.time_embed_dim = 4;
    s.n_classes = 4;
    return s;
}

ModelSettings tiny_plain_model() {
    ModelSettings s = tiny_dual_model();
    s.use_encoder = false;
    s.encoder_hidden.clear();
    s.denoiser_hidden = {6, 5};
    return s;
}

DatasetSpec ring_data() {
    DatasetSpec d;
    d.gmm = GmmSpec::ring(4, 1.5, 0.2);
    return d;
}
}  // namespace

TEST_CASE("config text parses comments, trims whitespace, and rejects malformed lines") {
    ConfigMap m = ConfigMap::parse_text(
        "# full-line comment\n"
        "  a.b = 3   # trailing comment\n"
        "\n"
        "name =  hello world \n"
        "flag = yes\n");
    REQUIRE(m.has("a.b"));
    REQUIRE(m.get_int("a.b", 0) == 3);
    REQUIRE(m.get_str("name", "") == "hello world");
    REQUIRE(m.get_bool("flag", false));
    REQUIRE_FALSE(m.has("missing"));
    REQUIRE_NOTHROW(m.finish());

    REQUIRE_THROWS_AS(ConfigMap::parse_text("a = 1\na = 2\n"), ConfigError);   // duplicate key
    REQUIRE_THROWS_AS(ConfigMap::parse_text("just some words\n"), ConfigError);  // no '='
    REQUIRE_THROWS_AS(ConfigMap::parse_text("= 3\n"), ConfigError);            // empty key
    REQUIRE_THROWS_AS(ConfigMap::parse_file(tmp_path("no_such_file.cfg")), IoError);
}

TEST_CASE("config getters enforce value types") {
    ConfigMap m = ConfigMap::parse_text(
        "n = 12\n"
        "x = 2.5\n"
        "frac = .75\n"
        "t1 = true\nt2 = 1\nt3 = yes\n"
        "f1 = false\nf2 = 0\nf3 = no\n"
        "b_bad = maybe\n"
        "n_bad = 3.5\n"
        "x_bad = abc\n"
        "seed_big = 18446744073709551615\n"
        "seed_neg = -3\n"
        "ints = 32, 16 ,8\n"
        "doubles = 0.5, -1.25\n"
        "seeds = 7,8\n"
        "ints_bad = 4, x\n"
        "leftover = 1\n");
    REQUIRE(m.get_long("n", 0) == 12);
    REQUIRE(m.get_int("n", 0) == 12);
    REQUIRE(m.get_double("x", 0.0) == 2.5);
    REQUIRE(m.get_double("frac", 0.0) == 0.75);
    REQUIRE(m.get_double("n", 0.0) == 12.0);  // integers read fine as doubles
    for (const char* k : {"t1", "t2", "t3"}) REQUIRE(m.get_bool(k, false));
    for (const char* k : {"f1", "f2", "f3"}) REQUIRE_FALSE(m.get_bool(k, true));
    REQUIRE_THROWS_AS(m.get_bool("b_bad", true), ConfigError);
    REQUIRE_THROWS_AS(m.get_long("n_bad", 0), ConfigError);
    REQUIRE_THROWS_AS(m.get_double("x_bad", 0.0), ConfigError);
    REQUIRE(m.require_u64("seed_big") == UINT64_MAX);
    REQUIRE_THROWS_AS(m.require_u64("seed_neg"), ConfigError);
    REQUIRE_THROWS_AS(m.require_u64("absent"), ConfigError);
    REQUIRE(m.get_int_list("ints", {}) == std::vector<int>{32, 16, 8});
    REQUIRE(m.get_double_list("doubles", {}) == std::vector<double>{0.5, -1.25});
    REQUIRE(m.get_u64_list("seeds", {}) == std::vector<uint64_t>{7, 8});
    REQUIRE(m.get_int_list("absent", {1, 2}) == std::vector<int>{1, 2});
    REQUIRE_THROWS_AS(m.get_int_list("ints_bad", {}), ConfigError);
    REQUIRE_THROWS_AS(m.finish(), ConfigError);  // "leftover" was never read
}

TEST_CASE("unused keys are reported as unknown") {
    ConfigMap m = ConfigMap::parse_text("known = 1\nmystery = 2\n");
    REQUIRE(m.get_int("known", 0) == 1);
    try {
        m.finish();
        FAIL("finish() accepted an unconsumed key");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("mystery") != std::string::npos);
    }
    m.set("mystery", "3");  // set() does not mark keys used
    REQUIRE(m.get_int("mystery", 0) == 3);
    REQUIRE_NOTHROW(m.finish());
}

TEST_CASE("run configuration fills defaults from a minimal file") {
    EnvGuard guard;
    ConfigMap m = ConfigMap::parse_text("seed = 42\n");
    RunConfig c = build_run_config(m, Command::Train);
    REQUIRE(c.command == Command::Train);
    REQUIRE(c.seed == 42);
    REQUIRE(c.output_dir == "out");
    REQUIRE(c.lambda_min == -12.0);
    REQUIRE(c.lambda_max == 12.0);
    REQUIRE(c.data.is_gmm);
    REQUIRE(c.data.gmm.n_components() == 8);
    REQUIRE(c.data.dim() == 2);
    REQUIRE(c.conditional);
    REQUIRE(c.model.data_dim == 2);
    REQUIRE(c.model.encoder_hidden == std::vector<int>{64, 64, 64});
    REQUIRE(c.model.denoiser_hidden == std::vector<int>{64, 64});
    REQUIRE(c.model.time_embed_dim == 32);
    REQUIRE(c.model.n_classes == 8);
    REQUIRE(c.model.use_encoder);
    REQUIRE(c.model.param_mode == ParamMode::VPred);
    REQUIRE(c.train.K == 8);
    REQUIRE(c.train.k == 64);
    REQUIRE(c.train.weight.mode == WeightMode::Sigmoid);
    REQUIRE(c.train.weight.bias == 1.0);
    REQUIRE(c.train.embed_drop_p == c.model.embed_drop_p);
    REQUIRE(c.sampler.K == c.train.K);
    REQUIRE(c.sampler.k == c.train.k);
    REQUIRE(c.sampler.guidance.w == 0.0);
    REQUIRE(c.distill.variant == DistillVariant::Standard);
    REQUIRE(c.distill.init == StudentInit::FrozenTeacherEncoder);
    REQUIRE(c.ablate_values == std::vector<double>{0.0, 0.5});
    REQUIRE(c.ablate_seeds == std::vector<uint64_t>{1, 2, 3});
    LogSnrSchedule sched = c.schedule();
    REQUIRE(sched.eval(0.0).lambda == Catch::Approx(12.0).margin(1e-9));
    REQUIRE(sched.eval(1.0).lambda == Catch::Approx(-12.0).margin(1e-9));
}

TEST_CASE("run configuration honors explicit settings") {
    EnvGuard guard;
    ConfigMap m = ConfigMap::parse_text(
        "command = sample\n"
        "seed = 7\n"
        "output_dir = runs/demo\n"
        "schedule.lambda_min = -9\n"
        "schedule.lambda_max = 9\n"
        "data.kind = grid\n"
        "data.grid.side = 4\n"
        "data.grid.classes = 2\n"
        "data.translate_prob = 0.25\n"
        "data.max_shift = 1\n"
        "model.conditional = true\n"
        "model.encoder_hidden = 32, 16\n"
        "model.denoiser_hidden = 8\n"
        "model.time_embed_dim = 16\n"
        "model.activation = relu\n"
        "model.param_mode = x\n"
        "model.embed_drop_p = 0.3\n"
        "train.weight = unit\n"
        "train.class_drop_p = 0.2\n"
        "sampler.K = 2\n"
        "sampler.k = 32\n"
        "sampler.noise_interp = 0.0\n"
        "sampler.clip = true\n"
        "sampler.label = 1\n"
        "sampler.use_ema = false\n"
        "guidance.w = 1.5\n"
        "guidance.lambda_lo = 1.0\n"
        "guidance.lambda_hi = 4.0\n"
        "distill.variant = rollout\n"
        "distill.init = pretrained\n"
        "distill.student_denoiser_hidden = 8, 8\n"
        "eval.samples = 500\n"
        "ablate.values = 0, 0.25, 0.5\n"
        "ablate.seeds = 11, 12\n");
    RunConfig c = build_run_config(m, Command::Sample);
    REQUIRE(c.seed == 7);
    REQUIRE(c.output_dir == "runs/demo");
    REQUIRE(c.lambda_min == -9.0);
    REQUIRE_FALSE(c.data.is_gmm);
    REQUIRE(c.data.grid.side == 4);
    REQUIRE(c.data.grid.n_classes == 2);
    REQUIRE(c.data.dim() == 16);
    REQUIRE(c.data.translate_prob == 0.25);
    REQUIRE(c.model.data_dim == 16);
    REQUIRE(c.model.encoder_hidden == std::vector<int>{32, 16});
    REQUIRE(c.model.denoiser_hidden == std::vector<int>{8});
    REQUIRE(c.model.activation == Activation::ReLU);
    REQUIRE(c.model.param_mode == ParamMode::XPred);
    REQUIRE(c.model.n_classes == 2);
    REQUIRE(c.model.embed_drop_p == 0.3);
    REQUIRE(c.train.weight.mode == WeightMode::Unit);
    REQUIRE(c.train.class_drop_p == 0.2);
    REQUIRE(c.sampler.K == 2);
    REQUIRE(c.sampler.k == 32);
    REQUIRE(c.sampler.noise_interp == 0.0);
    REQUIRE(c.sampler.clip);
    REQUIRE(c.sample_label == 1);
    REQUIRE_FALSE(c.use_ema);
    REQUIRE(c.guidance.w == 1.5);
    REQUIRE(c.sampler.guidance.w == 1.5);
    REQUIRE(c.sampler.guidance.lambda_lo == 1.0);
    REQUIRE(c.distill.variant == DistillVariant::FullRollout);
    REQUIRE(c.distill.init == StudentInit::PretrainedDualRate);
    REQUIRE(c.distill.student_denoiser_hidden == std::vector<int>{8, 8});
    REQUIRE(c.eval_samples == 500);
    REQUIRE(c.ablate_values == std::vector<double>{0.0, 0.25, 0.5});
    REQUIRE(c.ablate_seeds == std::vector<uint64_t>{11, 12});

    ConfigMap uncond = ConfigMap::parse_text("seed = 1\nmodel.conditional = false\n");
    RunConfig cu = build_run_config(uncond, Command::Train);
    REQUIRE(cu.model.n_classes == 0);
}

TEST_CASE("run configuration rejects invalid values") {
    EnvGuard guard;
    auto build = [](const std::string& text, Command cmd = Command::Train) {
        ConfigMap m = ConfigMap::parse_text(text);
        return build_run_config(m, cmd);
    };
    REQUIRE_THROWS_AS(build(""), ConfigError);  // seed is mandatory
    REQUIRE_THROWS_AS(build("command = train\nseed = 1\n", Command::Sample), ConfigError);
    REQUIRE_THROWS_AS(build("command = bogus\nseed = 1\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ndata.kind = blob\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\nmodel.activation = tanh\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\nmodel.param_mode = eps\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ntrain.weight = quadratic\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ndistill.variant = fast\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ndistill.init = random\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\nschedule.lambda_min = 5\nschedule.lambda_max = 2\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ndata.translate_prob = 1.5\n"), ConfigError);
    REQUIRE_THROWS_AS(build("seed = 1\ntrain.lrr = 0.001\n"), ConfigError);  // typo caught by finish()
}

TEST_CASE("output directory honors the environment override") {
    EnvGuard guard;
    ConfigMap m1 = ConfigMap::parse_text("seed = 1\noutput_dir = from_file\n");
    REQUIRE(build_run_config(m1, Command::Train).output_dir == "from_file");

    ::setenv("DUALRATE_OUT", "/tmp/forced_out", 1);
    ConfigMap m2 = ConfigMap::parse_text("seed = 1\noutput_dir = from_file\n");
    REQUIRE(build_run_config(m2, Command::Train).output_dir == "/tmp/forced_out");
    ::unsetenv("DUALRATE_OUT");

    ConfigMap m3 = ConfigMap::parse_text("seed = 1\n");
    REQUIRE(build_run_config(m3, Command::Train).output_dir == "out");
}

TEST_CASE("loss weight parsing covers both modes") {
    ConfigMap m = ConfigMap::parse_text(
        "a.weight = unit\n"
        "b.weight = sigmoid\n"
        "b.weight_bias = 2.5\n"
        "c.weight = soft\n");
    LossWeight a = parse_weight(m, "a", LossWeight{});
    REQUIRE(a.mode == WeightMode::Unit);
    REQUIRE(a(3.7) == 1.0);
    LossWeight b = parse_weight(m, "b", LossWeight{});
    REQUIRE(b.mode == WeightMode::Sigmoid);
    REQUIRE(b.bias == 2.5);
    REQUIRE(b(2.5) == Catch::Approx(0.5).margin(1e-15));
    LossWeight dflt = parse_weight(m, "z", LossWeight{});
    REQUIRE(dflt.mode == WeightMode::Sigmoid);
    REQUIRE(dflt.bias == 1.0);
    REQUIRE_THROWS_AS(parse_weight(m, "c", LossWeight{}), ConfigError);
}

TEST_CASE("container files round-trip sections with arbitrary bytes") {
    const std::string path = tmp_path("sections.bin");
    std::string payload_a("alpha\0with\0nulls", 16);
    std::string payload_b;
    for (int i = 0; i < 256; ++i) payload_b.push_back(static_cast<char>(i));
    write_checkpoint_file(path, {{"alpha", payload_a}, {"beta", payload_b}, {"empty", ""}});

    auto sections = read_checkpoint_file(path);
    REQUIRE(sections.size() == 3);
    REQUIRE(sections.at("alpha") == payload_a);
    REQUIRE(sections.at("beta") == payload_b);
    REQUIRE(sections.at("empty").empty());
    REQUIRE(require_section(sections, "alpha") == payload_a);
    REQUIRE_THROWS_AS(require_section(sections, "gamma"), IoError);
}

TEST_CASE("container files detect corruption, truncation, and future versions") {
    const std::string path = tmp_path("corrupt.bin");
    write_checkpoint_file(path, {{"alpha", std::string(64, 'x')}});
    const std::string good = slurp(path);

    // Flip one payload byte: checksum must catch it.
    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x40;
    dump(path, flipped);
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);

    // Damage the magic prefix.
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    dump(path, bad_magic);
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);

    // Chop bytes off the end.
    dump(path, good.substr(0, good.size() - 6));
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);

    // Too short to even hold a header.
    dump(path, "DRCK");
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);

    // A file from a newer format version must be refused even when intact.
    std::string v2body("DRCKPT01", 8);
    append_u32(v2body, 2);  // version
    append_u32(v2body, 0);  // no sections
    dump(path, seal_with_crc(v2body));
    try {
        read_checkpoint_file(path);
        FAIL("reader accepted a future format version");
    } catch (const IoError& e) {
        REQUIRE(std::string(e.what()).find("version") != std::string::npos);
    }

    // A section header promising more bytes than the file holds.
    std::string trunc_body("DRCKPT01", 8);
    append_u32(trunc_body, 1);    // version
    append_u32(trunc_body, 1);    // one section
    append_u32(trunc_body, 100);  // name length, but no name bytes follow
    dump(path, seal_with_crc(trunc_body));
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);

    // Repeated section names are ambiguous and refused.
    write_checkpoint_file(path, {{"dup", "a"}, {"dup", "b"}});
    REQUIRE_THROWS_AS(read_checkpoint_file(path), IoError);
}

TEST_CASE("training checkpoints restore every field bitwise") {
    const std::string path = tmp_path("train.ckpt");
    Rng rng(321);
    DualRateModel model = DualRateModel::create(tiny_dual_model(), rng);
    TrainConfig cfg;
    cfg.K = 2;
    cfg.k = 8;
    cfg.batch_size = 8;
    cfg.n_steps = 4;
    cfg.snapshot_every = 4;
    cfg.warmup_steps = 2;
    cfg.eval_batch = 16;
    TrainState st = init_train_state(std::move(model), cfg);
    DatasetSpec data = ring_data();
    train_loop(st, cfg, data, kSched, rng);
    save_train_checkpoint(path, st, rng);

    // Load into a freshly initialized state with different parameters.
    Rng other(999);
    TrainState loaded = init_train_state(DualRateModel::create(tiny_dual_model(), other), cfg);
    Rng restored(0);
    load_train_checkpoint(path, loaded, restored);

    REQUIRE(loaded.model.params.values == st.model.params.values);
    REQUIRE(loaded.model.data_dim() == st.model.data_dim());
    REQUIRE(loaded.opt.m == st.opt.m);
    REQUIRE(loaded.opt.v == st.opt.v);
    REQUIRE(loaded.opt.step == st.opt.step);
    REQUIRE(loaded.opt.lr == st.opt.lr);
    REQUIRE(loaded.opt.warmup_steps == st.opt.warmup_steps);
    REQUIRE(loaded.ema.shadow == st.ema.shadow);
    REQUIRE(loaded.ema.decay == st.ema.decay);
    REQUIRE(loaded.step == st.step);
    REQUIRE(loaded.loss_count == 0);  // the final snapshot always flushes the window
    REQUIRE(loaded.history.empty());

    // The restored generator continues the exact same stream.
    for (int i = 0; i < 16; ++i) {
        REQUIRE(restored.normal() == rng.normal());
        REQUIRE(restored.uniform() == rng.uniform());
    }

    // Kind checks: a training checkpoint is not a distillation one and vice versa.
    auto sections = read_checkpoint_file(path);
    REQUIRE(decode_meta(require_section(sections, "meta")) == "train");
    const std::string bogus = tmp_path("bogus_kind.ckpt");
    write_checkpoint_file(bogus, {{"meta", encode_meta("distill")}});
    TrainState sink = init_train_state(DualRateModel::create(tiny_dual_model(), other), cfg);
    Rng sink_rng(0);
    REQUIRE_THROWS_AS(load_train_checkpoint(bogus, sink, sink_rng), IoError);

    // Missing sections are reported rather than silently defaulted.
    const std::string partial = tmp_path("partial.ckpt");
    write_checkpoint_file(partial, {{"meta", encode_meta("train")}});
    REQUIRE_THROWS_AS(load_train_checkpoint(partial, sink, sink_rng), IoError);
}

TEST_CASE("sampling loader picks the trained model or the distilled student") {
    EnvGuard guard;
    const std::string train_path = tmp_path("sl_train.ckpt");
    Rng rng(77);
    DualRateModel model = DualRateModel::create(tiny_dual_model(), rng);
    TrainConfig tcfg;
    tcfg.K = 2;
    tcfg.k = 8;
    tcfg.batch_size = 8;
    tcfg.n_steps = 2;
    tcfg.snapshot_every = 2;
    tcfg.warmup_steps = 0;
    tcfg.eval_batch = 16;
    TrainState st = init_train_state(std::move(model), tcfg);
    DatasetSpec data = ring_data();
    train_loop(st, tcfg, data, kSched, rng);
    save_train_checkpoint(train_path, st, rng);

    LoadedModel lt = load_model_for_sampling(train_path);
    REQUIRE(lt.kind == "train");
    REQUIRE(lt.model.params.values == st.model.params.values);
    REQUIRE(lt.ema.shadow == st.ema.shadow);

    // Distillation: the student is what gets sampled, not the teacher.
    const std::string distill_path = tmp_path("sl_distill.ckpt");
    Rng drng(78);
    DualRateModel teacher = DualRateModel::create(tiny_plain_model(), drng);
    DistillConfig dcfg;
    dcfg.K = 2;
    dcfg.k = 4;
    dcfg.batch_size = 8;
    dcfg.n_steps = 2;
    dcfg.pretrain_steps = 0;
    dcfg.teacher_mse_max = 0.0;
    dcfg.student_denoiser_hidden = {4};
    dcfg.eval_samples = 32;
    dcfg.warmup_steps = 0;
    DistillState ds = init_distill_state(teacher, dcfg, data, kSched, drng);
    distill_loop(ds, dcfg, data, kSched, drng);
    save_distill_checkpoint(distill_path, ds, drng);

    LoadedModel ld = load_model_for_sampling(distill_path);
    REQUIRE(ld.kind == "distill");
    REQUIRE(ld.model.params.values == ds.student.params.values);
    REQUIRE(ld.model.params.values != ds.teacher.params.values);
    REQUIRE(ld.ema.shadow == ds.student_ema.shadow);

    // Unknown kinds are refused.
    const std::string weird = tmp_path("sl_weird.ckpt");
    write_checkpoint_file(weird, {{"meta", encode_meta("mystery")}});
    REQUIRE_THROWS_AS(load_model_for_sampling(weird), IoError);
}

TEST_CASE("plots render identical bytes for identical inputs") {
    std::vector<std::pair<double, double>> pts{{0.0, 1.0}, {1.0, 2.5}, {2.0, 0.5}};
    std::vector<std::pair<double, double>> curve{{0.0, 0.2}, {1.0, 1.7}, {2.0, 3.1}};
    auto render = [&](const std::string& path, bool log_y) {
        SvgPlot p(480.0, 320.0, "demo plot");
        p.add_scatter(pts, "#1f77b4");
        p.add_line(curve, "#d62728");
        p.set_axis_labels("step", "value");
        if (log_y) p.use_log_y();
        p.write(path);
    };
    const std::string a = tmp_path("plot_a.svg");
    const std::string b = tmp_path("plot_b.svg");
    const std::string c = tmp_path("plot_log.svg");
    render(a, false);
    render(b, false);
    render(c, true);
    const std::string bytes_a = slurp(a);
    REQUIRE(bytes_a == slurp(b));
    REQUIRE(bytes_a.find("<svg") != std::string::npos);
    REQUIRE(bytes_a.find("demo plot") != std::string::npos);
    REQUIRE(bytes_a != slurp(c));
}

TEST_CASE("ablation runner writes one row per arm and reproduces its CSV") {
    EnvGuard guard;
    const std::string out_a = tmp_path("ablate_a");
    const std::string out_b = tmp_path("ablate_b");
    std::filesystem::remove_all(out_a);
    std::filesystem::remove_all(out_b);

    auto run_into = [&](const std::string& out) {
        ConfigMap m = ConfigMap::parse_text(
            "seed = 5\n"
            "command = ablate\n"
            "output_dir = " + out + "\n"
            "data.gmm.components = 3\n"
            "model.encoder_hidden = 6\n"
            "model.denoiser_hidden = 5\n"
            "model.time_embed_dim = 4\n"
            "train.K = 2\n"
            "train.k = 4\n"
            "train.n_steps = 20\n"
            "train.batch_size = 8\n"
            "train.warmup_steps = 4\n"
            "train.eval_batch = 16\n"
            "eval.samples = 64\n"
            "eval.projections = 8\n"
            "ablate.values = 0, 0.5\n"
            "ablate.seeds = 21, 22\n");
        RunConfig cfg = build_run_config(m, Command::Ablate);
        REQUIRE(run_command(cfg) == 0);
    };
    run_into(out_a);
    run_into(out_b);

    const std::string csv = slurp(out_a + "/ablate.csv");
    std::vector<std::string> lines;
    for (size_t pos = 0; pos < csv.size();) {
        size_t nl = csv.find('\n', pos);
        REQUIRE(nl != std::string::npos);  // file ends with a newline
        lines.push_back(csv.substr(pos, nl - pos));
        pos = nl + 1;
    }
    REQUIRE(lines.size() == 1 + 2 * 2);  // header + |seeds| x |values| arms
    REQUIRE(lines[0] == "seed,embed_drop_p,w2,baseline_w2,oracle_mse");
    REQUIRE(lines[1].substr(0, 5) == "21,0,");
    REQUIRE(lines[3].substr(0, 5) == "22,0,");
    // Every arm reports finite metrics.
    for (size_t i = 1; i < lines.size(); ++i)
        REQUIRE(lines[i].find("nan") == std::string::npos);

    const std::string svg = slurp(out_a + "/ablate.svg");
    REQUIRE(svg.find("<svg") != std::string::npos);
    REQUIRE(svg.find("context-drop ablation") != std::string::npos);

    REQUIRE(csv == slurp(out_b + "/ablate.csv"));
    REQUIRE(svg == slurp(out_b + "/ablate.svg"));

    std::filesystem::remove_all(out_a);
    std::filesystem::remove_all(out_b);
}
