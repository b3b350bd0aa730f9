// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dualrate/checkpoint.hpp"
#include "dualrate/config.hpp"
#include "dualrate/distill.hpp"
#include "dualrate/eval.hpp"
#include "dualrate/sample.hpp"
#include "dualrate/svg.hpp"
#include "dualrate/train.hpp"

namespace dualrate {

// Round-trip-exact decimal form, shared by every CSV and summary the runner
// writes so identical runs produce identical bytes.
inline std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline std::ofstream open_output(const std::string& path, bool append = false) {
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw IoError("runner: cannot open '" + path + "' for writing");
    return f;
}

// Labels distributed like the dataset's class prior (mixture weights for the
// ring, uniform for the grid).
inline std::vector<int> prior_labels(const DatasetSpec& data, int n, Rng& rng) {
    return data.sample(n, rng).labels;
}

// W2 noise floor: two independent draws of the dataset against each other.
inline double resampling_baseline(const DatasetSpec& data, int n, int n_projections, Rng& rng) {
    DataBatch a = data.sample(n, rng);
    DataBatch b = data.sample(n, rng);
    return sliced_w2(a.x, b.x, n_projections, rng);
}

inline std::vector<int> eval_labels_for(const DualRateModel& model, const DatasetSpec& data,
                                        const DataBatch& ref) {
    if (model.n_classes == 0) return {};
    if (model.n_classes != data.n_classes())
        throw ConfigError("runner: the model expects " + std::to_string(model.n_classes) +
                          " classes but the dataset has " + std::to_string(data.n_classes()));
    (void)data;
    return ref.labels;
}

inline void write_samples_csv(const std::string& path, const Matrix& x,
                              std::span<const int> labels) {
    std::ofstream f = open_output(path);
    for (int j = 0; j < x.cols; ++j) f << (j ? ",x" : "x") << j;
    if (!labels.empty()) f << ",label";
    f << "\n";
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < x.cols; ++j) {
            if (j) f << ",";
            f << g17(x.at(i, j));
        }
        if (!labels.empty()) f << "," << labels[i];
        f << "\n";
    }
}

inline void write_scatter_svg(const std::string& path, const std::string& title,
                              const Matrix& generated, const Matrix& reference) {
    if (generated.cols < 2) return;  // scatter plots only make sense in 2-D and up
    SvgPlot plot(480, 480, title);
    plot.add_scatter(xy_points(reference), "#9bbbe3", 2.0);
    plot.add_scatter(xy_points(generated), "#d9603b", 2.0);
    plot.set_axis_labels("x0", "x1");
    plot.write(path);
}

// Fixed-stream scatter of model samples against fresh data; purely a visual
// artifact, so it always runs on the snapshot evaluation seed.
inline void write_model_scatter(const std::string& path, const std::string& title,
                                const DualRateModel& model, std::span<const double> params,
                                const DatasetSpec& data, const LogSnrSchedule& sched,
                                SampleConfig sc) {
    if (data.dim() < 2) return;
    Rng rng(kSnapshotEvalSeed);
    sc.n_samples = std::min(sc.n_samples, 2048);
    DataBatch ref = data.sample(sc.n_samples, rng);
    std::vector<int> labels = eval_labels_for(model, data, ref);
    Matrix gen = ancestral_sample(model, params, labels, sched, sc, rng);
    write_scatter_svg(path, title, gen, ref.x);
}

// --- train ------------------------------------------------------------------

inline int run_train(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    LogSnrSchedule sched = cfg.schedule();
    Rng rng(cfg.seed);

    const bool resuming = !cfg.resume.empty();
    TrainState st;
    if (resuming) {
        load_train_checkpoint(cfg.resume, st, rng);  // optimizer hyperparameters travel with it
    } else {
        st = init_train_state(DualRateModel::create(cfg.model, rng), cfg.train);
    }

    if (cfg.checkpoint_every > 0 && cfg.checkpoint_every % cfg.train.snapshot_every != 0)
        throw ConfigError("train.checkpoint_every must be a multiple of train.snapshot_every");

    std::string metrics_path = join_path(cfg.output_dir, "metrics.csv");
    std::ofstream csv = open_output(metrics_path, resuming);
    // Wall-clock stays out of the CSV so same-seed runs reproduce it bitwise.
    if (csv.tellp() == std::streampos(0)) csv << "step,loss,oracle_mse\n";

    SnapshotHook hook = [&](const TrainState& s, const SnapshotRecord& r) {
        csv << r.step << "," << g17(r.loss) << "," << g17(r.oracle_mse) << "\n";
        csv.flush();
        std::cout << "step " << r.step << "  loss " << r.loss << "  oracle_mse " << r.oracle_mse
                  << "  (" << r.wall_ms << " ms)\n";
        if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 &&
            r.step != cfg.train.n_steps)
            save_train_checkpoint(join_path(cfg.output_dir, "ckpt_" + std::to_string(r.step) + ".ckpt"),
                                  s, rng);
    };

    train_loop(st, cfg.train, cfg.data, sched, rng, hook);
    save_train_checkpoint(join_path(cfg.output_dir, "final.ckpt"), st, rng);

    if (!st.history.empty()) {
        std::vector<std::pair<double, double>> loss_pts, mse_pts;
        for (const SnapshotRecord& r : st.history) {
            loss_pts.emplace_back(static_cast<double>(r.step), r.loss);
            if (std::isfinite(r.oracle_mse))
                mse_pts.emplace_back(static_cast<double>(r.step), r.oracle_mse);
        }
        SvgPlot loss_plot(560, 360, "training loss");
        loss_plot.add_line(loss_pts, "#d9603b");
        loss_plot.set_axis_labels("step", "loss");
        loss_plot.write(join_path(cfg.output_dir, "loss_curve.svg"));
        if (!mse_pts.empty()) {
            SvgPlot mse_plot(560, 360, "denoiser error vs. exact posterior mean");
            mse_plot.add_line(mse_pts, "#3b6fd9");
            mse_plot.set_axis_labels("step", "oracle mse");
            mse_plot.use_log_y();
            mse_plot.write(join_path(cfg.output_dir, "oracle_mse.svg"));
        }
    }
    write_model_scatter(join_path(cfg.output_dir, "samples.svg"), "model samples vs. data",
                        st.model, st.ema.shadow, cfg.data, sched, cfg.sampler);
    return 0;
}

// --- sample -----------------------------------------------------------------

inline int run_sample(const RunConfig& cfg) {
    if (cfg.sample_checkpoint.empty())
        throw ConfigError("sample: sampler.checkpoint is required");
    std::filesystem::create_directories(cfg.output_dir);
    LogSnrSchedule sched = cfg.schedule();
    Rng rng(cfg.seed);

    LoadedModel lm = load_model_for_sampling(cfg.sample_checkpoint);
    const std::vector<double>& params = cfg.use_ema ? lm.ema.shadow : lm.model.params.values;

    std::vector<int> labels;
    if (lm.model.n_classes > 0) {
        if (cfg.sample_label >= 0) {
            if (cfg.sample_label >= lm.model.n_classes)
                throw ConfigError("sample: sampler.label out of range");
            labels.assign(cfg.sampler.n_samples, cfg.sample_label);
        } else if (cfg.data.n_classes() == lm.model.n_classes) {
            labels = prior_labels(cfg.data, cfg.sampler.n_samples, rng);
        } else {
            throw ConfigError("sample: dataset classes disagree with the model; set sampler.label");
        }
    }

    SampleTrace trace;
    const bool want_trace = !cfg.trace_out.empty();
    Matrix x = ancestral_sample(lm.model, params, labels, sched, cfg.sampler, rng,
                                want_trace ? &trace : nullptr);

    write_samples_csv(join_path(cfg.output_dir, "samples.csv"), x, labels);
    if (want_trace) {
        std::ofstream f = open_output(cfg.trace_out);
        f << "i,t,tau,refreshed,heavy_guided,guided\n";
        for (size_t i = 0; i < trace.steps.size(); ++i) {
            const TraceStep& s = trace.steps[i];
            f << i << "," << g17(s.t) << "," << g17(s.tau) << "," << (s.refreshed ? 1 : 0) << ","
              << (s.heavy_guided ? 1 : 0) << "," << (s.guided ? 1 : 0) << "\n";
        }
    }

    NfeCount nfe = count_nfe(cfg.sampler, sched);
    double cost = inference_cost(CostModel{}, nfe.heavy, nfe.light, nfe.guided_heavy,
                                 nfe.guided_light);
    std::ofstream summary = open_output(join_path(cfg.output_dir, "summary.txt"));
    summary << "n=" << cfg.sampler.n_samples << "\n"
            << "K=" << cfg.sampler.K << "\n"
            << "k=" << cfg.sampler.k << "\n"
            << "nfe_heavy=" << nfe.heavy << "\n"
            << "nfe_light=" << nfe.light << "\n"
            << "nfe_guided_heavy=" << nfe.guided_heavy << "\n"
            << "nfe_guided_light=" << nfe.guided_light << "\n"
            << "inference_cost=" << g17(cost) << "\n";

    if (x.cols >= 2) {
        Rng ref_rng(kSnapshotEvalSeed);
        DataBatch ref = cfg.data.sample(x.rows, ref_rng);
        write_scatter_svg(join_path(cfg.output_dir, "samples.svg"), "generated vs. data", x, ref.x);
    }
    return 0;
}

// --- eval -------------------------------------------------------------------

inline int run_eval(const RunConfig& cfg) {
    if (cfg.eval_checkpoint.empty()) throw ConfigError("eval: eval.checkpoint is required");
    std::filesystem::create_directories(cfg.output_dir);
    LogSnrSchedule sched = cfg.schedule();
    Rng rng(cfg.seed);

    LoadedModel lm = load_model_for_sampling(cfg.eval_checkpoint);
    const std::vector<double>& params = cfg.use_ema ? lm.ema.shadow : lm.model.params.values;

    DataBatch ref = cfg.data.sample(cfg.eval_samples, rng);
    std::vector<int> labels = eval_labels_for(lm.model, cfg.data, ref);
    SampleConfig sc = cfg.sampler;
    sc.n_samples = cfg.eval_samples;
    Matrix gen = ancestral_sample(lm.model, params, labels, sched, sc, rng);
    double w2 = sliced_w2(gen, ref.x, cfg.eval_projections, rng);
    double baseline = resampling_baseline(cfg.data, cfg.eval_samples, cfg.eval_projections, rng);

    double omse_mean = std::numeric_limits<double>::quiet_NaN();
    double omse_mid = std::numeric_limits<double>::quiet_NaN();
    if (cfg.data.is_gmm) {
        PredictFn pred = make_model_predictor(lm.model, params);
        std::vector<double> grid = default_lambda_grid();
        OracleMseResult om = oracle_mse(pred, cfg.data.gmm, sc.K, sched, grid, cfg.eval_batch, rng);
        omse_mean = om.mean;
        omse_mid = om.mean_in(-4.0, 4.0);
        std::ofstream f = open_output(join_path(cfg.output_dir, "oracle_mse.csv"));
        f << "lambda,t,tau,mse\n";
        for (const OracleMsePoint& p : om.points)
            f << g17(p.lambda) << "," << g17(p.t) << "," << g17(p.tau) << "," << g17(p.mse) << "\n";
    }

    ElboResult elbo;
    bool have_elbo = cfg.elbo_draws > 0;
    if (have_elbo) {
        PredictFn pred = make_model_predictor(lm.model, params);
        DataBatch eb = cfg.data.sample(cfg.eval_batch, rng);
        elbo = elbo_estimate(pred, eb, sc.K, sched, cfg.elbo_draws, rng);
    }

    NfeCount nfe = count_nfe(sc, sched);
    double cost = inference_cost(CostModel{}, nfe.heavy, nfe.light, nfe.guided_heavy,
                                 nfe.guided_light);

    std::ofstream summary = open_output(join_path(cfg.output_dir, "summary.txt"));
    summary << "w2=" << g17(w2) << "\n"
            << "baseline_w2=" << g17(baseline) << "\n"
            << "w2_ratio=" << g17(w2 / baseline) << "\n"
            << "oracle_mse_mean=" << g17(omse_mean) << "\n"
            << "oracle_mse_mid=" << g17(omse_mid) << "\n";
    if (have_elbo)
        summary << "elbo_nats_per_dim=" << g17(elbo.nats_per_dim) << "\n"
                << "elbo_std_error=" << g17(elbo.std_error) << "\n"
                << "prior_kl_per_dim=" << g17(elbo.prior_kl_per_dim) << "\n";
    summary << "nfe_heavy=" << nfe.heavy << "\n"
            << "nfe_light=" << nfe.light << "\n"
            << "inference_cost=" << g17(cost) << "\n";

    write_scatter_svg(join_path(cfg.output_dir, "samples.svg"), "generated vs. data", gen, ref.x);
    return 0;
}

// --- distill ----------------------------------------------------------------

inline int run_distill(const RunConfig& cfg) {
    if (cfg.teacher_path.empty()) throw ConfigError("distill: distill.teacher is required");
    std::filesystem::create_directories(cfg.output_dir);
    LogSnrSchedule sched = cfg.schedule();
    Rng rng(cfg.seed);

    LoadedModel t = load_model_for_sampling(cfg.teacher_path);
    DualRateModel teacher = std::move(t.model);
    teacher.params.values = t.ema.shadow;  // distill from the averaged weights

    DistillState st = init_distill_state(std::move(teacher), cfg.distill, cfg.data, sched, rng);

    std::string metrics_path = join_path(cfg.output_dir, "metrics.csv");
    std::ofstream csv = open_output(metrics_path);
    csv << "step,aux_loss,student_loss,w2\n";
    DistillHook hook = [&](const DistillState&, const DistillSnapshot& r) {
        csv << r.step << "," << g17(r.aux_loss) << "," << g17(r.student_loss) << "," << g17(r.w2)
            << "\n";
        csv.flush();
        std::cout << "step " << r.step << "  aux " << r.aux_loss << "  student " << r.student_loss
                  << "  w2 " << r.w2 << "  (" << r.wall_ms << " ms)\n";
    };

    distill_loop(st, cfg.distill, cfg.data, sched, rng, hook);
    save_distill_checkpoint(join_path(cfg.output_dir, "final.ckpt"), st, rng);

    if (!st.history.empty()) {
        std::vector<std::pair<double, double>> w2_pts;
        for (const DistillSnapshot& r : st.history)
            w2_pts.emplace_back(static_cast<double>(r.step), r.w2);
        SvgPlot plot(560, 360, "student sample quality");
        plot.add_line(w2_pts, "#d9603b");
        plot.set_axis_labels("step", "sliced W2");
        plot.write(join_path(cfg.output_dir, "w2_curve.svg"));
    }
    SampleConfig sc;
    sc.K = cfg.distill.K;
    sc.k = cfg.distill.k;
    sc.noise_interp = 0.0;
    sc.n_samples = 2048;
    write_model_scatter(join_path(cfg.output_dir, "samples.svg"), "student samples vs. data",
                        st.student, st.student_ema.shadow, cfg.data, sched, sc);
    return 0;
}

// --- ablate -----------------------------------------------------------------

// Trains one arm per (seed, embed-drop probability) pair and reports the final
// sample quality of each, plus a per-seed resampling baseline.
inline int run_ablate(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    LogSnrSchedule sched = cfg.schedule();
    if (cfg.ablate_values.empty() || cfg.ablate_seeds.empty())
        throw ConfigError("ablate: needs at least one value and one seed");

    std::ofstream csv = open_output(join_path(cfg.output_dir, "ablate.csv"));
    csv << "seed,embed_drop_p,w2,baseline_w2,oracle_mse\n";

    std::vector<std::vector<std::pair<double, double>>> curves;
    for (uint64_t seed : cfg.ablate_seeds) {
        Rng base_rng(kSnapshotEvalSeed ^ seed);
        double baseline = resampling_baseline(cfg.data, cfg.eval_samples, cfg.eval_projections,
                                              base_rng);
        std::vector<std::pair<double, double>> curve;
        for (double drop : cfg.ablate_values) {
            ModelSettings ms = cfg.model;
            ms.embed_drop_p = drop;
            TrainConfig tc = cfg.train;
            tc.embed_drop_p = drop;
            Rng run_rng(seed);
            TrainState st = init_train_state(DualRateModel::create(ms, run_rng), tc);
            train_loop(st, tc, cfg.data, sched, run_rng);

            Rng eval_rng(kSnapshotEvalSeed);
            DataBatch ref = cfg.data.sample(cfg.eval_samples, eval_rng);
            std::vector<int> labels = eval_labels_for(st.model, cfg.data, ref);
            SampleConfig sc = cfg.sampler;
            sc.n_samples = cfg.eval_samples;
            Matrix gen = ancestral_sample(st.model, st.ema.shadow, labels, sched, sc, eval_rng);
            double w2 = sliced_w2(gen, ref.x, cfg.eval_projections, eval_rng);
            double omse = st.history.empty() ? std::numeric_limits<double>::quiet_NaN()
                                             : st.history.back().oracle_mse;
            csv << seed << "," << g17(drop) << "," << g17(w2) << "," << g17(baseline) << ","
                << g17(omse) << "\n";
            csv.flush();
            curve.emplace_back(drop, w2);
        }
        curves.push_back(std::move(curve));
    }

    SvgPlot plot(560, 360, "context-drop ablation");
    const char* colors[] = {"#d9603b", "#3b6fd9", "#3bab6f", "#a03bd9", "#d9b13b", "#3bc6d9"};
    for (size_t i = 0; i < curves.size(); ++i)
        plot.add_line(curves[i], colors[i % 6]);
    plot.set_axis_labels("embed drop probability", "sliced W2");
    plot.write(join_path(cfg.output_dir, "ablate.svg"));
    return 0;
}

inline int run_command(const RunConfig& cfg) {
    switch (cfg.command) {
        case Command::Train: return run_train(cfg);
        case Command::Sample: return run_sample(cfg);
        case Command::Distill: return run_distill(cfg);
        case Command::Eval: return run_eval(cfg);
        case Command::Ablate: return run_ablate(cfg);
    }
    throw ConfigError("runner: unknown command");
}

}  // namespace dualrate
