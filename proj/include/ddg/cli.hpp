#pragma once

// Command-line front end. Subcommands are thin wrappers over the library;
// every output file lands under --out-dir and a key=value summary goes to
// stdout. Exit codes: 0 ok, 1 validation/usage error, 2 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ddg/analysis.hpp"
#include "ddg/config.hpp"
#include "ddg/datagen.hpp"
#include "ddg/harness.hpp"
#include "ddg/runtime.hpp"

namespace ddg::cli {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> target_domain;
    std::string out_dir = ".";
    std::string data_dir;   // optional pre-generated dataset
    std::string checkpoint; // eval / export
};

inline std::string resolve(const Common& c, const std::string& p) {
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (std::filesystem::path(c.out_dir) / p).string();
}

inline ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config_path);
    if (c.seed) cfg.seeds = {*c.seed};
    if (c.target_domain) cfg.target_domain = *c.target_domain;
    cfg.validate();
    return cfg;
}

inline Dataset load_or_generate(const Common& c, const SyntheticDatasetConfig& dc) {
    if (c.data_dir.empty()) return generate_dataset(dc);
    auto loaded = load_dataset(resolve(c, c.data_dir));
    if (!(loaded.config == dc))
        throw ConfigError("dataset in '" + c.data_dir + "' was generated with a different [dataset] config");
    return std::move(loaded.data);
}

inline void summary(std::ostream& out, const KeyValues& kv) { write_kv(out, kv); }

inline int cmd_gen_data(const Common& c, std::ostream& out) {
    const ExperimentConfig cfg = load_config(c);
    const Dataset ds = generate_dataset(cfg.dataset);
    const std::string dir = resolve(c, c.data_dir.empty() ? "dataset" : c.data_dir);
    save_dataset(dir, ds, cfg.dataset);
    summary(out, {{"status", "ok"},
                  {"command", "gen-data"},
                  {"path", dir},
                  {"num_samples", std::to_string(ds.size())},
                  {"content_hash", hex64(ds.content_hash())}});
    return 0;
}

inline int cmd_train(const Common& c, const std::string& resume, std::ostream& out) {
    std::filesystem::create_directories(c.out_dir);
    std::vector<RunRecord> records;
    if (!resume.empty()) {
        Trainer t = Trainer::load(resolve(c, resume));
        const Dataset ds = load_or_generate(c, t.config().dataset);
        RunOptions opt;
        opt.checkpoint_path = resolve(c, "checkpoint_seed" + std::to_string(t.seed()) + ".ddgt");
        records.push_back(finish_run(t, leave_one_out(ds, t.config().target_domain), opt));
    } else {
        const ExperimentConfig cfg = load_config(c);
        const Dataset ds = load_or_generate(c, cfg.dataset);
        for (std::uint64_t seed : cfg.seeds) {
            RunOptions opt;
            opt.checkpoint_path = resolve(c, "checkpoint_seed" + std::to_string(seed) + ".ddgt");
            records.push_back(run_single(cfg, seed, ds, opt));
        }
    }
    std::vector<double> acc;
    std::string files;
    for (const auto& r : records) {
        const std::string path = resolve(c, "run_seed" + std::to_string(r.seed) + ".txt");
        write_file_bytes(path, r.to_text());
        files += (files.empty() ? "" : ",") + path;
        acc.push_back(r.accuracy);
    }
    const Aggregate a = aggregate(acc);
    summary(out, {{"status", "ok"},
                  {"command", "train"},
                  {"variant", to_string(records.front().config.network.variant)},
                  {"target_domain", std::to_string(records.front().config.target_domain)},
                  {"runs", std::to_string(records.size())},
                  {"accuracy_mean", format_double(a.mean)},
                  {"accuracy_std", format_double(a.std)},
                  {"records", files}});
    return 0;
}

inline int cmd_eval(const Common& c, std::ostream& out) {
    if (c.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
    Trainer t = Trainer::load(resolve(c, c.checkpoint));
    const int target = c.target_domain.value_or(t.config().target_domain);
    const Dataset ds = load_or_generate(c, t.config().dataset);
    const Dataset eval = ds.filter_domains({target});
    if (eval.size() == 0) throw ConfigError("target domain " + std::to_string(target) + " has no samples");
    summary(out, {{"status", "ok"},
                  {"command", "eval"},
                  {"target_domain", std::to_string(target)},
                  {"epoch", std::to_string(t.epoch())},
                  {"accuracy", format_double(evaluate(t.network(), eval))}});
    return 0;
}

inline int cmd_ablate(const Common& c, std::ostream& out) {
    std::filesystem::create_directories(c.out_dir);
    const ExperimentConfig cfg = load_config(c);
    const Dataset ds = load_or_generate(c, cfg.dataset);
    const auto rows = ablation_suite(cfg, ds);
    const std::string path = resolve(c, "ablation.csv");
    write_file_bytes(path, ablation_csv(rows));
    KeyValues kv{{"status", "ok"}, {"command", "ablate"}, {"csv", path}};
    for (Variant v : AblationOptions{}.variants)
        for (bool mix : {true, false}) {
            std::vector<double> acc;
            std::size_t params = 0;
            for (const auto& r : rows)
                if (r.variant == v && r.domainmix == mix) {
                    acc.push_back(r.accuracy);
                    params = r.params;
                }
            const Aggregate a = aggregate(acc);
            const std::string key = to_string(v) + (mix ? ".domainmix_on" : ".domainmix_off");
            kv.emplace_back(key + ".accuracy_mean", format_double(a.mean));
            kv.emplace_back(key + ".accuracy_std", format_double(a.std));
            kv.emplace_back(key + ".params", std::to_string(params));
        }
    summary(out, kv);
    return 0;
}

inline int cmd_export_kmm(const Common& c, std::size_t probe_samples, std::ostream& out) {
    if (c.checkpoint.empty()) throw UsageError("export-kmm needs --checkpoint");
    Trainer t = Trainer::load(resolve(c, c.checkpoint));
    std::optional<Tensor<float>> probe;
    bool dynamic = false;
    for (const auto& b : t.network().blocks()) dynamic |= b.dyn.has_value();
    if (dynamic) {
        if (probe_samples == 0) throw UsageError("dynamic checkpoint: export-kmm needs --probe-samples > 0");
        const int target = c.target_domain.value_or(t.config().target_domain);
        const Dataset ds = load_or_generate(c, t.config().dataset).filter_domains({target});
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < std::min(probe_samples, ds.size()); ++i) idx.push_back(i);
        probe = make_batch(ds, idx).images;
    }
    const auto kmm = kernel_magnitude(t.network(), probe ? &*probe : nullptr);
    std::filesystem::create_directories(c.out_dir);
    write_file_bytes(resolve(c, "kmm.csv"), kernel_magnitude_csv(kmm));
    write_file_bytes(resolve(c, "kmm_aggregate.pgm"), matrix_pgm(kmm.aggregate));
    for (std::size_t l = 0; l < kmm.layers.size(); ++l)
        write_file_bytes(resolve(c, "kmm_layer" + std::to_string(l) + ".pgm"), matrix_pgm(kmm.layers[l]));
    const auto sc = skeleton_contrast(kmm.aggregate);
    summary(out, {{"status", "ok"},
                  {"command", "export-kmm"},
                  {"mode", dynamic ? "dynamic" : "static"},
                  {"layers", std::to_string(kmm.layers.size())},
                  {"criss_cross_mean", format_double(sc.criss_cross)},
                  {"corner_mean", format_double(sc.corners)},
                  {"csv", resolve(c, "kmm.csv")}});
    return 0;
}

inline int cmd_export_coeffs(const Common& c, const std::vector<std::size_t>& blocks_in, std::ostream& out) {
    if (c.checkpoint.empty()) throw UsageError("export-coeffs needs --checkpoint");
    Trainer t = Trainer::load(resolve(c, c.checkpoint));
    std::vector<std::size_t> blocks = blocks_in;
    if (blocks.empty())
        for (std::size_t i = 0; i < t.network().blocks().size(); ++i)
            if (t.network().blocks()[i].dyn) blocks.push_back(i);
    if (blocks.empty()) throw UsageError("checkpoint has no dynamic blocks");
    const Dataset ds = load_or_generate(c, t.config().dataset);
    const auto rows = export_coefficients(t.network(), ds, blocks);
    std::filesystem::create_directories(c.out_dir);
    const std::string path = resolve(c, "coefficients.csv");
    write_file_bytes(path, coefficients_csv(rows));
    summary(out, {{"status", "ok"},
                  {"command", "export-coeffs"},
                  {"rows", std::to_string(rows.size())},
                  {"blocks", join_list(blocks)},
                  {"csv", path}});
    return 0;
}

/// Parses and runs one command line. Never throws.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    tune_allocator();
    CLI::App app{"Dynamic-kernel domain generalization toolkit"};
    app.require_subcommand(1);
    Common c;
    std::string resume;
    std::size_t probe_samples = 32;
    std::vector<std::size_t> blocks;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", c.config_path, "experiment config file");
        sub->add_option("--seed", c.seed, "override protocol.seeds with a single seed");
        sub->add_option("--out-dir", c.out_dir, "directory for every output file");
        sub->add_option("--target-domain", c.target_domain, "override protocol.target_domain");
        sub->add_option("--data", c.data_dir, "pre-generated dataset directory (relative to --out-dir)");
    };
    auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset");
    add_common(gen);
    auto* train = app.add_subcommand("train", "leave-one-domain-out training over the configured seeds");
    add_common(train);
    train->add_option("--resume", resume, "continue from a checkpoint (relative to --out-dir)");
    auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint on its held-out domain");
    add_common(ev);
    ev->add_option("--checkpoint", c.checkpoint)->required();
    auto* ab = app.add_subcommand("ablate", "variants x DomainMix on/off x seeds, written as CSV");
    add_common(ab);
    auto* kmm = app.add_subcommand("export-kmm", "kernel magnitude matrices (CSV + PGM)");
    add_common(kmm);
    kmm->add_option("--checkpoint", c.checkpoint)->required();
    kmm->add_option("--probe-samples", probe_samples, "held-out samples used as probe for dynamic kernels");
    auto* co = app.add_subcommand("export-coeffs", "meta-adjuster coefficients per sample and block (CSV)");
    add_common(co);
    co->add_option("--checkpoint", c.checkpoint)->required();
    co->add_option("--blocks", blocks, "block indices (default: all dynamic blocks)")->delimiter(',');

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    }
    try {
        if (gen->parsed()) return cmd_gen_data(c, out);
        if (train->parsed()) return cmd_train(c, resume, out);
        if (ev->parsed()) return cmd_eval(c, out);
        if (ab->parsed()) return cmd_ablate(c, out);
        if (kmm->parsed()) return cmd_export_kmm(c, probe_samples, out);
        if (co->parsed()) return cmd_export_coeffs(c, blocks, out);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace ddg::cli
