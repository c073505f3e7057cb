// SPDX-License-Identifier: Apache-2.0
// Command-line driver for the l-DAE desk-scale experiments.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ldae/experiment.hpp"
#include "ldae/patches.hpp"

namespace fs = std::filesystem;
using namespace ldae;

namespace {

struct Common {
    std::string config_path;
    long seed = -1;
    std::string out = "out";
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "Config file (key=value with [sections])");
    sub->add_option("--seed", c.seed, "Master seed");
    sub->add_option("--out", c.out, "Output directory");
    sub->add_option("--override", c.overrides, "key=value, repeatable")->take_all();
}

Config resolve(const Common& c) {
    Config cfg = c.config_path.empty() ? Config() : Config::load(c.config_path);
    for (const auto& o : c.overrides) {
        cfg.apply_override(o);
    }
    if (c.seed >= 0) {
        cfg.set("seed", std::to_string(c.seed));
    }
    return cfg;
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

RunManifest start_manifest(const std::string& command, const Config& snapshot, const ExperimentConfig& e) {
    RunManifest m;
    m.command = command;
    m.name = command;
    m.seed = e.seed;
    m.config = snapshot.values();
    return m;
}

void finish(RunManifest& m, const Config& snapshot, const fs::path& out) {
    // getters may have recorded more defaults since the manifest was started
    m.config = snapshot.values();
    write_text_atomic(out / "config.txt", snapshot.to_text());
    m.write(out / "manifest.txt");
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<TokenizerKind> kinds_of(const std::vector<std::string>& names) {
    std::vector<TokenizerKind> out;
    for (const auto& n : names) {
        out.push_back(parse_tokenizer_kind(n));
    }
    return out;
}

// A trained model and its task: loaded from --checkpoint or pretrained now.
struct Model {
    PretrainRun run;
    PatchBasis full;
};

Model obtain_model(const ExperimentConfig& e, const Config& cfg, const Dataset& data, const std::string& checkpoint) {
    Model m;
    m.full = fit_full_pca(e, data);
    const int step = static_cast<int>(cfg.get_int("ladder.step", 6));
    const PatchBasis basis = truncate(m.full, e.latent_dim);
    if (checkpoint.empty()) {
        m.run = pretrain(e, data, ladder_task(step, basis, m.full, e));
    } else {
        m.run.task = ladder_task(step, basis, m.full, e);
        m.run.params = load_denoiser<float>(checkpoint);
        if (m.run.params.config.input_dim != m.run.task.input_dim() ||
            m.run.params.config.output_dim != m.run.task.output_dim()) {
            throw std::invalid_argument("checkpoint " + checkpoint + " does not match ladder step " +
                                        std::to_string(step));
        }
    }
    return m;
}

int cmd_synth(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    Dataset d = synth_dataset(e.synth);
    write_dataset(d, c.out);
    RunManifest m = start_manifest("synth", cfg, e);
    m.metrics["images"] = std::to_string(d.images.size());
    m.metrics["val_images"] = std::to_string(d.indices(true).size());
    char sum[32];
    std::snprintf(sum, sizeof(sum), "%016llx", static_cast<unsigned long long>(d.manifest.checksum));
    m.metrics["checksum"] = sum;
    m.timings["total_s"] = elapsed(t0);
    m.artifacts["labels"] = (fs::path(c.out) / "labels.csv").string();
    m.artifacts["dataset_manifest"] = (fs::path(c.out) / "manifest.txt").string();
    finish(m, cfg, fs::path(c.out) / "run");
    std::cout << "synth: " << d.images.size() << " images, checksum " << sum << '\n';
    return 0;
}

int cmd_ingest(const Common& c, const std::string& dir, const std::string& labels) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const fs::path labels_path = labels.empty() ? fs::path(dir) / "labels.csv" : fs::path(labels);
    const Dataset d = ingest_dataset(dir, labels_path, e.synth.val_fraction, e.synth.seed);
    fs::create_directories(c.out);
    write_text_atomic(fs::path(c.out) / "dataset_manifest.txt", d.manifest.to_text());
    RunManifest m = start_manifest("ingest", cfg, e);
    m.metrics["images"] = std::to_string(d.images.size());
    m.metrics["classes"] = std::to_string(d.manifest.classes);
    finish(m, cfg, c.out);
    std::cout << "ingest: " << d.images.size() << " images, " << d.manifest.classes << " classes\n";
    return 0;
}

int cmd_fit_tokenizer(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset data = load_dataset(e);
    const PatchBasis full = fit_full_pca(e, data);
    const PatchBasis basis = fit_tokenizer(e, data, e.tokenizer, e.latent_dim, full);
    const fs::path out = c.out;
    fs::create_directories(out);
    save_basis(basis, out / "basis.ldae");
    write_ppm(visualize_filters(basis), out / "filters.ppm");
    std::string eig = "index,eigenvalue\n";
    for (Index i = 0; i < full.eigenvalues.size(); ++i) {
        eig += std::to_string(i) + "," + format_double(full.eigenvalues[i]) + "\n";
    }
    write_text_atomic(out / "eigenvalues.csv", eig);

    const auto val = data.indices(true);
    const auto grids = patch_grids(data, val, e.patch_size);
    double mse = 0.0;
    for (const auto& g : grids) {
        mse += reconstruction_mse(basis, g);
    }
    mse /= static_cast<double>(grids.size());
    RunManifest m = start_manifest("fit-tokenizer", cfg, e);
    m.metrics["val_reconstruction_mse"] = format_double(mse);
    m.metrics["trailing_eigen_sum"] = format_double(full.eigenvalues.tail(full.full_dim - basis.latent_dim).sum());
    m.timings["total_s"] = elapsed(t0);
    m.artifacts["basis"] = (out / "basis.ldae").string();
    m.artifacts["filters"] = (out / "filters.ppm").string();
    finish(m, cfg, out);
    std::cout << "fit-tokenizer: " << to_string(basis.kind) << " d=" << basis.latent_dim << " val mse " << mse << '\n';
    return 0;
}

int cmd_pretrain(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const Model model = obtain_model(e, cfg, data, "");
    const fs::path out = c.out;
    fs::create_directories(out);
    save_denoiser(model.run.params, out / "denoiser.ldae");
    save_basis(model.run.task.basis, out / "basis.ldae");
    std::string loss = "epoch,loss\n";
    for (std::size_t i = 0; i < model.run.train.epoch_loss.size(); ++i) {
        loss += std::to_string(i + 1) + "," + format_double(model.run.train.epoch_loss[i]) + "\n";
    }
    write_text_atomic(out / "loss.csv", loss);
    const PsnrReport psnr = denoising_psnr(model.run.params, model.run.task, data, e.patch_size, std::sqrt(1.0 / 3.0),
                                           e.seed);
    RunManifest m = start_manifest("pretrain", cfg, e);
    m.step = static_cast<int>(cfg.get_int("ladder.step", 6));
    m.metrics["initial_loss"] = format_double(model.run.train.initial_loss);
    m.metrics["final_loss"] = format_double(model.run.train.final_loss);
    m.metrics["noisy_psnr_db"] = fixed(psnr.noisy_db);
    m.metrics["denoised_psnr_db"] = fixed(psnr.denoised_db);
    m.metrics["params_checksum"] = std::to_string(params_checksum(model.run.params));
    m.timings["pretrain_s"] = model.run.seconds;
    m.artifacts["denoiser"] = (out / "denoiser.ldae").string();
    m.artifacts["basis"] = (out / "basis.ldae").string();
    finish(m, cfg, out);
    std::cout << "pretrain: loss " << model.run.train.initial_loss << " -> " << model.run.train.final_loss << ", PSNR "
              << psnr.noisy_db << " -> " << psnr.denoised_db << " dB (" << model.run.seconds << " s)\n";
    return 0;
}

int cmd_probe(const Common& c, const std::string& checkpoint) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const Model model = obtain_model(e, cfg, data, checkpoint);
    const ProbeOutcome p = probe_with_floor(e, data, model.run);
    const fs::path out = c.out;
    fs::create_directories(out);
    RunManifest m = start_manifest("probe", cfg, e);
    m.step = static_cast<int>(cfg.get_int("ladder.step", 6));
    std::istringstream kv(p.trained.to_kv("probe.") + p.floor.to_kv("floor."));
    std::string line;
    while (std::getline(kv, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) {
            m.metrics[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }
    finish(m, cfg, out);
    std::cout << "probe: top1 " << p.trained.top1 << " (random-init floor " << p.floor.top1 << ")\n";
    return 0;
}

int cmd_sweep_tokenizer(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const auto kinds = kinds_of(cfg.get_list("sweep.kinds", {"pca", "identity"}));
    std::vector<Index> dims;
    for (long d : cfg.get_int_list("sweep.dims", {4, 8, 16})) {
        dims.push_back(d);
    }
    const int step = static_cast<int>(cfg.get_int("sweep.step", 6));
    const auto t0 = std::chrono::steady_clock::now();
    const auto cells = run_tokenizer_sweep(e, data, kinds, dims, step);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_text_atomic(out / "tokenizer_sweep.csv", tokenizer_sweep_csv(cells));
    RunManifest m = start_manifest("sweep-tokenizer", cfg, e);
    m.step = step;
    for (const auto& cell : cells) {
        m.metrics[to_string(cell.kind) + "_d" + std::to_string(cell.latent_dim) + ".top1"] = fixed(cell.top1, 6);
    }
    m.timings["total_s"] = elapsed(t0);
    m.artifacts["table"] = (out / "tokenizer_sweep.csv").string();
    finish(m, cfg, out);
    std::cout << tokenizer_sweep_csv(cells);
    return 0;
}

FeatureFn feature_fn(const ExperimentConfig& e, const Dataset& data, const Model& model) {
    return [&e, &data, &model](int t, int blocks, bool noisy) {
        return extract_features(model.run.params, model.run.task, data, e.patch_size, t, blocks, noisy, e.probe_flip,
                                e.seed);
    };
}

int cmd_sweep_t(const Common& c, const std::string& checkpoint) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const Model model = obtain_model(e, cfg, data, checkpoint);
    std::vector<int> ts;
    for (long t : cfg.get_int_list("sweep.ts", {0, 10, 20, 40, 80})) {
        ts.push_back(static_cast<int>(t));
    }
    const bool flags[2] = {false, true};
    const SweepTable table = sweep_fixed_t(feature_fn(e, data, model), ts, flags, e.encoder_blocks(), e.probe);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_text_atomic(out / "sweep_t.csv", table.csv());
    RunManifest m = start_manifest("sweep-t", cfg, e);
    m.artifacts["table"] = (out / "sweep_t.csv").string();
    finish(m, cfg, out);
    std::cout << table.csv();
    return 0;
}

int cmd_sweep_depth(const Common& c, const std::string& checkpoint) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const Model model = obtain_model(e, cfg, data, checkpoint);
    std::vector<long> fallback;
    for (int b = 1; b <= e.depth; ++b) {
        fallback.push_back(b);
    }
    std::vector<int> blocks;
    for (long b : cfg.get_int_list("sweep.blocks", fallback)) {
        blocks.push_back(static_cast<int>(b));
    }
    const SweepTable table = sweep_encoder_depth(feature_fn(e, data, model), blocks, e.probe_t, e.probe);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_text_atomic(out / "sweep_depth.csv", table.csv());
    RunManifest m = start_manifest("sweep-depth", cfg, e);
    m.artifacts["table"] = (out / "sweep_depth.csv").string();
    finish(m, cfg, out);
    std::cout << table.csv();
    return 0;
}

int cmd_trajectory(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    std::vector<int> steps;
    for (long s : cfg.get_int_list("trajectory.steps", {1, 2, 3, 4, 5, 6, 7})) {
        steps.push_back(static_cast<int>(s));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = run_trajectory(e, cfg, data, c.out, steps);
    bool ok = true;
    RunManifest m = start_manifest("trajectory", cfg, e);
    for (const auto& r : rows) {
        ok = ok && r.ok;
        m.metrics["step" + std::to_string(r.step) + ".status"] = r.ok ? "ok" : "failed";
    }
    m.timings["total_s"] = elapsed(t0);
    m.artifacts["table"] = (fs::path(c.out) / "trajectory.csv").string();
    m.artifacts["bars"] = (fs::path(c.out) / "bars.csv").string();
    finish(m, cfg, c.out);
    std::cout << trajectory_csv(rows);
    return ok ? 0 : 1;
}

int cmd_visualize(const Common& c) {
    Config cfg = resolve(c);
    const ExperimentConfig e = ExperimentConfig::from(cfg);
    const Dataset data = load_dataset(e);
    const PatchBasis full = fit_full_pca(e, data);
    const PatchBasis basis = truncate(full, e.latent_dim);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_ppm(visualize_filters(full), out / "filters_full.ppm");
    write_ppm(visualize_filters(basis), out / "filters.ppm");
    const NoiseSchedule schedules[] = {NoiseSchedule::ddpm(e.steps), NoiseSchedule::linear_gamma_sq(e.steps),
                                       NoiseSchedule::fixed_gamma(e.steps), NoiseSchedule::single_level(e.steps)};
    for (const auto& s : schedules) {
        write_text_atomic(out / ("schedule_" + to_string(s.kind) + ".csv"), schedule_csv(s));
    }
    // latent noise rendered by inverse PCA versus plain pixel noise
    const auto val = data.indices(true);
    const ImageD& x0 = data.images[val.front()];
    CorruptionConfig cc{basis, NoiseSchedule::linear_gamma_sq(e.steps), NoiseSpace::image_in_image_out, true};
    for (int t : cfg.get_int_list("visualize.ts", {100, 250, 500, 750})) {
        Rng rng(derive_seed(e.seed, static_cast<std::uint64_t>(t)));
        const CorruptedImage latent = corrupt_image(x0, cc, t, rng);
        const ImageD pixel = corrupt_pixels(x0, latent.draw.sigma, rng);
        export_triptych(x0, latent.xt, pixel, out / ("noise_t" + std::to_string(t) + ".ppm"));
    }
    RunManifest m = start_manifest("visualize", cfg, e);
    m.artifacts["filters"] = (out / "filters.ppm").string();
    finish(m, cfg, out);
    std::cout << "visualize: wrote " << out.string() << '\n';
    return 0;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
    std::vector<RunManifest> manifests;
    for (const auto& in : inputs) {
        const fs::path p = in;
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& entry : fs::recursive_directory_iterator(p)) {
                if (entry.is_regular_file() && entry.path().filename() == "manifest.txt") {
                    found.push_back(entry.path());
                }
            }
            std::sort(found.begin(), found.end());
            for (const auto& f : found) {
                manifests.push_back(RunManifest::read(f));
            }
        } else {
            manifests.push_back(RunManifest::read(p));
        }
    }
    if (manifests.empty()) {
        throw std::invalid_argument("report: no manifests found");
    }
    const Report r = export_report(manifests);
    const fs::path out = c.out;
    fs::create_directories(out);
    write_text_atomic(out / "report.csv", r.csv);
    write_text_atomic(out / "report.md", r.markdown);
    std::cout << r.markdown;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"l-DAE desk-scale experiments"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version_string());

    Common common;
    std::string dir, labels, checkpoint;
    std::vector<std::string> inputs;

    auto* synth = app.add_subcommand("synth", "Generate the procedural shape dataset");
    auto* ingest = app.add_subcommand("ingest", "Validate a directory of PPM images with CSV labels");
    ingest->add_option("--dir", dir, "Image directory")->required();
    ingest->add_option("--labels", labels, "Labels CSV (default <dir>/labels.csv)");
    auto* fit = app.add_subcommand("fit-tokenizer", "Fit the patch tokenizer");
    auto* pre = app.add_subcommand("pretrain", "Pretrain one ladder step");
    auto* probe = app.add_subcommand("probe", "Linear probe against the random-init floor");
    auto* stok = app.add_subcommand("sweep-tokenizer", "Probe accuracy per tokenizer and latent dimension");
    auto* st = app.add_subcommand("sweep-t", "Probe accuracy per fixed t, clean and noisy input");
    auto* sd = app.add_subcommand("sweep-depth", "Probe accuracy per encoder depth");
    auto* traj = app.add_subcommand("trajectory", "Run the seven-step ladder");
    auto* vis = app.add_subcommand("visualize", "Filters, schedules and noise renderings");
    auto* rep = app.add_subcommand("report", "Merge run manifests into CSV and markdown");
    rep->add_option("inputs", inputs, "Manifest files or directories")->required();
    for (auto* sub : {synth, ingest, fit, pre, probe, stok, st, sd, traj, vis, rep}) {
        add_common(sub, common);
    }
    for (auto* sub : {probe, st, sd}) {
        sub->add_option("--checkpoint", checkpoint, "Denoiser checkpoint (default: pretrain now)");
    }

    CLI11_PARSE(app, argc, argv);
    try {
        if (synth->parsed()) return cmd_synth(common);
        if (ingest->parsed()) return cmd_ingest(common, dir, labels);
        if (fit->parsed()) return cmd_fit_tokenizer(common);
        if (pre->parsed()) return cmd_pretrain(common);
        if (probe->parsed()) return cmd_probe(common, checkpoint);
        if (stok->parsed()) return cmd_sweep_tokenizer(common);
        if (st->parsed()) return cmd_sweep_t(common, checkpoint);
        if (sd->parsed()) return cmd_sweep_depth(common, checkpoint);
        if (traj->parsed()) return cmd_trajectory(common);
        if (vis->parsed()) return cmd_visualize(common);
        if (rep->parsed()) return cmd_report(common, inputs);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
