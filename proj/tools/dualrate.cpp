// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train / sample / distill / eval / ablate, each
// driven by a flat key=value config file with optional flag overrides.

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "dualrate/runner.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Registers a flag that, when given, overrides one dotted config key.
void add_override(CLI::App* sub, Overrides& ov, const std::string& flag, const std::string& key,
                  const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&ov, key](const std::string& v) { ov.emplace_back(key, v); }, help);
}

void add_common(CLI::App* sub, std::string& config_path, Overrides& ov) {
    sub->add_option("config", config_path, "configuration file")->required();
    add_override(sub, ov, "--seed", "seed", "override the run seed");
    add_override(sub, ov, "--out", "output_dir", "override the output directory");
    sub->add_option_function<std::vector<std::string>>(
        "--set",
        [&ov](const std::vector<std::string>& pairs) {
            for (const std::string& p : pairs) {
                size_t eq = p.find('=');
                if (eq == std::string::npos)
                    throw CLI::ValidationError("--set", "expected key=value, got '" + p + "'");
                ov.emplace_back(p.substr(0, eq), p.substr(eq + 1));
            }
        },
        "override any config key (key=value, repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for dual-rate diffusion models"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;

    CLI::App* train = app.add_subcommand("train", "train a model");
    add_common(train, config_path, ov);
    add_override(train, ov, "--K", "train.K", "context refreshes per trajectory");
    add_override(train, ov, "--k", "train.k", "denoising steps per trajectory");
    add_override(train, ov, "--steps", "train.n_steps", "optimization steps");
    add_override(train, ov, "--resume", "train.resume", "resume from a checkpoint");

    CLI::App* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
    add_common(sample, config_path, ov);
    add_override(sample, ov, "--K", "sampler.K", "context refreshes");
    add_override(sample, ov, "--k", "sampler.k", "denoising steps");
    add_override(sample, ov, "--n", "sampler.n", "number of samples");
    add_override(sample, ov, "--guidance-w", "guidance.w", "guidance strength");
    add_override(sample, ov, "--trace-out", "sampler.trace_out", "write a per-step trace CSV");
    add_override(sample, ov, "--checkpoint", "sampler.checkpoint", "model checkpoint to sample");
    add_override(sample, ov, "--label", "sampler.label", "class label (-1 draws from the prior)");

    CLI::App* distill = app.add_subcommand("distill", "distill a teacher into a dual-rate student");
    add_common(distill, config_path, ov);
    add_override(distill, ov, "--K", "distill.K", "student context refreshes");
    add_override(distill, ov, "--k", "distill.k", "student denoising steps");
    add_override(distill, ov, "--variant", "distill.variant", "standard or rollout");
    add_override(distill, ov, "--teacher", "distill.teacher", "teacher checkpoint");
    add_override(distill, ov, "--steps", "distill.n_steps", "distillation steps");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, config_path, ov);
    add_override(eval, ov, "--checkpoint", "eval.checkpoint", "checkpoint to evaluate");
    add_override(eval, ov, "--n", "eval.samples", "samples for the W2 estimate");

    CLI::App* ablate = app.add_subcommand("ablate", "sweep the context-drop probability");
    add_common(ablate, config_path, ov);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        dualrate::Command cmd = dualrate::parse_command(app.get_subcommands().at(0)->get_name());
        dualrate::ConfigMap m = dualrate::ConfigMap::parse_file(config_path);
        for (const auto& [key, value] : ov) m.set(key, value);
        dualrate::RunConfig cfg = dualrate::build_run_config(m, cmd);
        return dualrate::run_command(cfg);
    } catch (const dualrate::NumericsError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const dualrate::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const dualrate::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
