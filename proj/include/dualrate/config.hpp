// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/distill.hpp"
#include "dualrate/models.hpp"
#include "dualrate/sample.hpp"
#include "dualrate/train.hpp"

namespace dualrate {

// Flat `key = value` configuration with `#` comments. Keys are dotted paths;
// duplicates and unrecognized keys are errors so typos cannot silently fall
// back to defaults.
class ConfigMap {
  public:
    static ConfigMap parse_text(const std::string& text) {
        ConfigMap m;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(trimmed.substr(0, eq));
            std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            if (!m.kv_.emplace(key, value).second)
                throw ConfigError("config: duplicate key '" + key + "'");
        }
        return m;
    }

    static ConfigMap parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("config: cannot open '" + path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse_text(ss.str());
    }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        return it->second;
    }

    std::string require_str(const std::string& key) {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("config: missing required key '" + key + "'");
        used_.insert(key);
        return it->second;
    }

    long get_long(const std::string& key, long dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        return parse_long(key, it->second);
    }

    int get_int(const std::string& key, int dflt) {
        long v = get_long(key, dflt);
        if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("config: '" + key + "' out of range");
        return static_cast<int>(v);
    }

    uint64_t require_u64(const std::string& key) {
        std::string s = require_str(key);
        uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size())
            throw ConfigError("config: '" + key + "' is not an unsigned integer: '" + s + "'");
        return v;
    }

    double get_double(const std::string& key, double dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        const std::string& s = it->second;
        char* end = nullptr;
        double v = std::strtod(s.c_str(), &end);
        if (end != s.c_str() + s.size() || s.empty())
            throw ConfigError("config: '" + key + "' is not a number: '" + s + "'");
        return v;
    }

    bool get_bool(const std::string& key, bool dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        const std::string& s = it->second;
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError("config: '" + key + "' is not a boolean: '" + s + "'");
    }

    std::vector<int> get_int_list(const std::string& key, std::vector<int> dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        return parse_int_list(key, it->second);
    }

    std::vector<double> get_double_list(const std::string& key, std::vector<double> dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        std::vector<double> out;
        for (const std::string& part : split_list(it->second)) {
            char* end = nullptr;
            double v = std::strtod(part.c_str(), &end);
            if (end != part.c_str() + part.size() || part.empty())
                throw ConfigError("config: '" + key + "' has a non-numeric entry: '" + part + "'");
            out.push_back(v);
        }
        return out;
    }

    std::vector<uint64_t> get_u64_list(const std::string& key, std::vector<uint64_t> dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        used_.insert(key);
        std::vector<uint64_t> out;
        for (const std::string& part : split_list(it->second)) {
            uint64_t v = 0;
            auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
            if (ec != std::errc() || p != part.data() + part.size())
                throw ConfigError("config: '" + key + "' has a non-integer entry: '" + part + "'");
            out.push_back(v);
        }
        return out;
    }

    // Every key must have been consumed by the schema by now.
    void finish() const {
        for (const auto& [k, v] : kv_)
            if (!used_.count(k)) throw ConfigError("config: unknown key '" + k + "'");
    }

  private:
    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static long parse_long(const std::string& key, const std::string& s) {
        long v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size())
            throw ConfigError("config: '" + key + "' is not an integer: '" + s + "'");
        return v;
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> parts;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                parts.push_back(trim(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        parts.push_back(trim(cur));
        return parts;
    }

    static std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
        std::vector<int> out;
        for (const std::string& part : split_list(s)) out.push_back(static_cast<int>(parse_long(key, part)));
        return out;
    }

    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
};

enum class Command { Train, Sample, Distill, Eval, Ablate };

inline Command parse_command(const std::string& s) {
    if (s == "train") return Command::Train;
    if (s == "sample") return Command::Sample;
    if (s == "distill") return Command::Distill;
    if (s == "eval") return Command::Eval;
    if (s == "ablate") return Command::Ablate;
    throw ConfigError("config: unknown command '" + s + "'");
}

inline const char* command_name(Command c) {
    switch (c) {
        case Command::Train: return "train";
        case Command::Sample: return "sample";
        case Command::Distill: return "distill";
        case Command::Eval: return "eval";
        case Command::Ablate: return "ablate";
    }
    return "?";
}

struct RunConfig {
    Command command = Command::Train;
    uint64_t seed = 0;
    std::string output_dir = "out";

    double lambda_min = -12.0;
    double lambda_max = 12.0;

    DatasetSpec data;
    ModelSettings model;
    bool conditional = true;

    TrainConfig train;
    long checkpoint_every = 0;  // steps; 0 = final checkpoint only
    std::string resume;

    SampleConfig sampler;
    GuidanceConfig guidance;
    std::string sample_checkpoint;
    std::string trace_out;
    int sample_label = -1;  // -1: labels drawn from the class prior
    bool use_ema = true;

    DistillConfig distill;
    std::string teacher_path;

    std::string eval_checkpoint;
    int eval_samples = 10000;
    int eval_projections = 128;
    int eval_batch = 512;
    long elbo_draws = 0;

    std::vector<double> ablate_values{0.0, 0.5};
    std::vector<uint64_t> ablate_seeds{1, 2, 3};

    LogSnrSchedule schedule() const { return LogSnrSchedule::cosine(lambda_min, lambda_max); }
};

inline LossWeight parse_weight(ConfigMap& m, const std::string& prefix, LossWeight dflt) {
    std::string mode = m.get_str(prefix + ".weight", dflt.mode == WeightMode::Sigmoid ? "sigmoid" : "unit");
    LossWeight w;
    if (mode == "sigmoid")
        w.mode = WeightMode::Sigmoid;
    else if (mode == "unit")
        w.mode = WeightMode::Unit;
    else
        throw ConfigError("config: '" + prefix + ".weight' must be sigmoid or unit");
    w.bias = m.get_double(prefix + ".weight_bias", dflt.bias);
    return w;
}

// Builds the full run description from a parsed map. `expected` is the CLI
// subcommand; a `command` key in the file must agree with it.
inline RunConfig build_run_config(ConfigMap& m, Command expected) {
    RunConfig c;
    c.command = expected;
    if (m.has("command")) {
        Command file_cmd = parse_command(m.require_str("command"));
        if (file_cmd != expected)
            throw ConfigError(std::string("config: file says command '") + command_name(file_cmd) +
                              "' but the CLI invoked '" + command_name(expected) + "'");
    }
    c.seed = m.require_u64("seed");
    c.output_dir = m.get_str("output_dir", "out");
    if (const char* env = std::getenv("DUALRATE_OUT")) c.output_dir = env;

    c.lambda_min = m.get_double("schedule.lambda_min", -12.0);
    c.lambda_max = m.get_double("schedule.lambda_max", 12.0);
    if (!(c.lambda_min < c.lambda_max))
        throw ConfigError("config: schedule.lambda_min must be below schedule.lambda_max");

    std::string kind = m.get_str("data.kind", "gmm");
    if (kind == "gmm") {
        c.data.is_gmm = true;
        int comps = m.get_int("data.gmm.components", 8);
        double radius = m.get_double("data.gmm.radius", 2.0);
        double std = m.get_double("data.gmm.std", 0.1);
        c.data.gmm = GmmSpec::ring(comps, radius, std);
    } else if (kind == "grid") {
        c.data.is_gmm = false;
        c.data.grid.side = m.get_int("data.grid.side", 8);
        c.data.grid.n_classes = m.get_int("data.grid.classes", 4);
        c.data.grid.validate();
    } else {
        throw ConfigError("config: data.kind must be gmm or grid");
    }
    c.data.translate_prob = m.get_double("data.translate_prob", 0.0);
    c.data.max_shift = m.get_int("data.max_shift", 2);
    if (c.data.translate_prob < 0 || c.data.translate_prob > 1)
        throw ConfigError("config: data.translate_prob outside [0, 1]");

    c.conditional = m.get_bool("model.conditional", true);
    c.model.data_dim = c.data.dim();
    c.model.encoder_hidden = m.get_int_list("model.encoder_hidden", {64, 64, 64});
    c.model.denoiser_hidden = m.get_int_list("model.denoiser_hidden", {64, 64});
    c.model.time_embed_dim = m.get_int("model.time_embed_dim", 32);
    std::string act = m.get_str("model.activation", "silu");
    if (act == "silu")
        c.model.activation = Activation::SiLU;
    else if (act == "relu")
        c.model.activation = Activation::ReLU;
    else
        throw ConfigError("config: model.activation must be silu or relu");
    c.model.use_encoder = m.get_bool("model.use_encoder", true);
    c.model.multi_level = m.get_bool("model.multi_level", true);
    std::string pm = m.get_str("model.param_mode", "v");
    if (pm == "v")
        c.model.param_mode = ParamMode::VPred;
    else if (pm == "x")
        c.model.param_mode = ParamMode::XPred;
    else
        throw ConfigError("config: model.param_mode must be v or x");
    c.model.n_classes = c.conditional ? c.data.n_classes() : 0;
    c.model.embed_drop_p = m.get_double("model.embed_drop_p", 0.5);

    c.train.K = m.get_int("train.K", 8);
    c.train.k = m.get_int("train.k", 64);
    c.train.batch_size = m.get_int("train.batch_size", 256);
    c.train.n_steps = m.get_long("train.n_steps", 20000);
    c.train.weight = parse_weight(m, "train", LossWeight{});
    c.train.lr = m.get_double("train.lr", 1e-3);
    c.train.beta1 = m.get_double("train.beta1", 0.9);
    c.train.beta2 = m.get_double("train.beta2", 0.99);
    c.train.epsilon = m.get_double("train.epsilon", 1e-12);
    c.train.clip_norm = m.get_double("train.clip_norm", 1.0);
    c.train.warmup_steps = m.get_long("train.warmup_steps", 100);
    c.train.ema_decay = m.get_double("train.ema_decay", 0.999);
    c.train.embed_drop_p = c.model.embed_drop_p;
    c.train.class_drop_p = m.get_double("train.class_drop_p", 0.1);
    c.train.network_dropout = m.get_double("train.network_dropout", 0.0);
    c.train.snapshot_every = m.get_long("train.snapshot_every", 2000);
    c.train.eval_batch = m.get_int("train.eval_batch", 512);
    c.checkpoint_every = m.get_long("train.checkpoint_every", 0);
    c.resume = m.get_str("train.resume", "");

    c.sampler.K = m.get_int("sampler.K", c.train.K);
    c.sampler.k = m.get_int("sampler.k", c.train.k);
    c.sampler.n_samples = m.get_int("sampler.n", 1000);
    c.sampler.noise_interp = m.get_double("sampler.noise_interp", 0.2);
    c.sampler.clip = m.get_bool("sampler.clip", false);
    c.sampler.record_states = m.get_bool("sampler.record_states", false);
    c.guidance.w = m.get_double("guidance.w", 0.0);
    c.guidance.lambda_lo = m.get_double("guidance.lambda_lo", 1.5);
    c.guidance.lambda_hi = m.get_double("guidance.lambda_hi", 5.0);
    c.sampler.guidance = c.guidance;
    c.sample_checkpoint = m.get_str("sampler.checkpoint", "");
    c.trace_out = m.get_str("sampler.trace_out", "");
    c.sample_label = m.get_int("sampler.label", -1);
    c.use_ema = m.get_bool("sampler.use_ema", true);

    c.distill.K = m.get_int("distill.K", 2);
    c.distill.k = m.get_int("distill.k", 8);
    std::string variant = m.get_str("distill.variant", "standard");
    if (variant == "standard")
        c.distill.variant = DistillVariant::Standard;
    else if (variant == "rollout")
        c.distill.variant = DistillVariant::FullRollout;
    else
        throw ConfigError("config: distill.variant must be standard or rollout");
    std::string init = m.get_str("distill.init", "frozen_teacher");
    if (init == "frozen_teacher")
        c.distill.init = StudentInit::FrozenTeacherEncoder;
    else if (init == "pretrained")
        c.distill.init = StudentInit::PretrainedDualRate;
    else
        throw ConfigError("config: distill.init must be frozen_teacher or pretrained");
    c.distill.student_denoiser_hidden = m.get_int_list("distill.student_denoiser_hidden", {64, 64});
    c.distill.student_encoder_hidden = m.get_int_list("distill.student_encoder_hidden", {});
    c.distill.n_steps = m.get_long("distill.n_steps", 4000);
    c.distill.batch_size = m.get_int("distill.batch_size", 256);
    c.distill.weight = parse_weight(m, "distill", LossWeight{});
    c.distill.lr = m.get_double("distill.lr", 2e-4);
    c.distill.beta1 = m.get_double("distill.beta1", 0.0);
    c.distill.beta2 = m.get_double("distill.beta2", 0.99);
    c.distill.epsilon = m.get_double("distill.epsilon", 1e-12);
    c.distill.clip_norm = m.get_double("distill.clip_norm", 1.0);
    c.distill.warmup_steps = m.get_long("distill.warmup_steps", 1000);
    c.distill.ema_decay = m.get_double("distill.ema_decay", 0.999);
    c.distill.pretrain_steps = m.get_long("distill.pretrain_steps", 2000);
    c.distill.pretrain_lr = m.get_double("distill.pretrain_lr", 1e-3);
    c.distill.teacher_mse_max = m.get_double("distill.teacher_mse_max", 0.5);
    c.distill.snapshot_every = m.get_long("distill.snapshot_every", 500);
    c.distill.eval_samples = m.get_int("distill.eval_samples", 2048);
    c.teacher_path = m.get_str("distill.teacher", "");

    c.eval_checkpoint = m.get_str("eval.checkpoint", "");
    c.eval_samples = m.get_int("eval.samples", 10000);
    c.eval_projections = m.get_int("eval.projections", 128);
    c.eval_batch = m.get_int("eval.batch", 512);
    c.elbo_draws = m.get_long("eval.elbo_draws", 0);

    c.ablate_values = m.get_double_list("ablate.values", {0.0, 0.5});
    c.ablate_seeds = m.get_u64_list("ablate.seeds", {1, 2, 3});

    m.finish();
    return c;
}

}  // namespace dualrate
