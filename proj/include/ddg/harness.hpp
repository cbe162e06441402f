#pragma once

// Leave-one-domain-out training and evaluation, checkpoints, run records and
// the ablation table.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ddg/config.hpp"
#include "ddg/datagen.hpp"
#include "ddg/network.hpp"
#include "ddg/ops.hpp"
#include "ddg/serialize.hpp"
#include "ddg/tape.hpp"

namespace ddg {

inline constexpr const char* kCodeVersion = "ddg-0.1.0";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LeakageError : ValidationError {
    using ValidationError::ValidationError;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    double loss = 0; // mean over steps
    std::size_t steps = 0;
};

/// Fraction of argmax(logits) == label, ties broken toward the lowest class.
inline double evaluate(Network<float>& net, const Dataset& ds, std::size_t chunk = 128) {
    if (ds.size() == 0) throw ValidationError("evaluate: empty sample list");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
        const Batch b = make_batch(ds, idx);
        const auto r = net.forward(b.images, Mode::eval);
        const Tensor<float>& z = r.logits->value;
        const std::size_t K = z.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (z.at(i, k) > z.at(i, best)) best = k;
            correct += static_cast<int>(best) == ds.labels[idx[i]];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline std::uint64_t split_hash(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::uint64_t s = ds.sample_hash(i);
        h = fnv1a(&s, 1, h);
    }
    return h;
}

/// Throws LeakageError if any evaluation image also occurs in training.
inline void assert_no_leakage(const Dataset& train, const Dataset& eval) {
    std::unordered_set<std::uint64_t> seen;
    for (std::size_t i = 0; i < train.size(); ++i) seen.insert(train.sample_hash(i));
    for (std::size_t i = 0; i < eval.size(); ++i)
        if (seen.count(eval.sample_hash(i)))
            throw LeakageError("held-out sample " + std::to_string(i) + " (hash " + hex64(eval.sample_hash(i)) +
                               ") also appears in the training split");
}

/// One seed's training state: network, momentum buffers, the two data
/// streams (batch order, DomainMix draws) and the loss history.
class Trainer {
public:
    Trainer(const ExperimentConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), seed_(seed), net_(Network<float>::build(cfg.network_spec(), seed)),
          sampler_rng_(Rng(seed).fork(100)), mix_rng_(Rng(seed).fork(101)) {
        cfg_.validate();
        for (const auto& [name, p] : net_.parameters()) momentum_.emplace_back(p->value.shape());
    }

    const ExperimentConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    Network<float>& network() { return net_; }
    int epoch() const { return epoch_; }
    bool finished() const { return epoch_ >= cfg_.training.epochs; }
    const std::vector<EpochLog>& history() const { return history_; }
    const std::vector<double>& step_losses() const { return step_losses_; }

    EpochLog train_epoch(const Dataset& sources) {
        if (finished()) throw UsageError("train_epoch: all " + std::to_string(cfg_.training.epochs) + " epochs done");
        EpochLog log;
        log.epoch = epoch_;
        log.lr = cosine_lr(epoch_, cfg_.training.epochs, cfg_.training.base_lr);
        const SgdOptions opt{log.lr, cfg_.training.momentum, cfg_.training.weight_decay};
        const auto plan = domain_balanced_batches(sources, cfg_.training.batch_size, sampler_rng_);
        double sum = 0;
        for (std::size_t step = 0; step < plan.size(); ++step) {
            const Batch batch = apply_domain_mix(make_batch(sources, plan[step]), mix_rng_, cfg_.domainmix);
            double loss = 0;
            try {
                GradTape<float> tape;
                net_.zero_grad();
                const auto r = net_.forward(batch.images, Mode::train, &tape);
                const auto L = ag::cross_entropy(&tape, r.logits, batch.labels);
                loss = L->value[0];
                if (!std::isfinite(loss)) throw NumericError("non-finite loss");
                tape.backward(L);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch_) + " step " + std::to_string(step) + ": " +
                                   e.what());
            }
            const auto& params = net_.parameters();
            for (std::size_t i = 0; i < params.size(); ++i)
                sgd_step(params[i].second->value, params[i].second->grad_or_zeros(), momentum_[i], opt);
            step_losses_.push_back(loss);
            sum += loss;
        }
        log.steps = plan.size();
        log.loss = plan.empty() ? 0.0 : sum / static_cast<double>(plan.size());
        history_.push_back(log);
        ++epoch_;
        return log;
    }

    // ---- checkpoint ----

    TensorFile to_tensors() const {
        TensorFile f;
        auto u64s = [](std::initializer_list<std::uint64_t> xs) {
            // split into 32-bit halves so f64 holds them exactly
            std::vector<double> v;
            for (auto x : xs) {
                v.push_back(static_cast<double>(x & 0xFFFFFFFFu));
                v.push_back(static_cast<double>(x >> 32));
            }
            return Tensor<double>({v.size()}, v);
        };
        f.push_back({"meta/version", Tensor<double>({1}, double(kCheckpointVersion))});
        const std::string text = cfg_.to_text();
        Tensor<float> cfg_bytes({text.size()});
        for (std::size_t i = 0; i < text.size(); ++i) cfg_bytes[i] = static_cast<unsigned char>(text[i]);
        f.push_back({"meta/config", cfg_bytes});
        f.push_back({"meta/seed", u64s({seed_})});
        f.push_back({"meta/epoch", Tensor<double>({1}, double(epoch_))});
        for (const auto& [name, rng] : {std::pair<const char*, const Rng*>{"meta/rng_sampler", &sampler_rng_},
                                        {"meta/rng_domainmix", &mix_rng_}}) {
            const auto s = rng->snapshot();
            auto t = u64s({s.s[0], s.s[1], s.s[2], s.s[3], s.seed});
            t.vec().push_back(s.has_spare ? 1.0 : 0.0);
            t.vec().push_back(s.spare);
            f.push_back({name, Tensor<double>({t.size()}, t.vec())});
        }
        Tensor<double> hist({history_.size(), 4});
        for (std::size_t i = 0; i < history_.size(); ++i) {
            hist.at(i, 0) = history_[i].epoch;
            hist.at(i, 1) = history_[i].lr;
            hist.at(i, 2) = history_[i].loss;
            hist.at(i, 3) = static_cast<double>(history_[i].steps);
        }
        f.push_back({"meta/history", hist});
        f.push_back({"meta/step_losses", Tensor<double>({step_losses_.size()}, step_losses_)});
        const auto& params = net_.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            f.push_back({"param/" + params[i].first, params[i].second->value});
            f.push_back({"momentum/" + params[i].first, momentum_[i]});
        }
        for (const auto& [name, t] : net_.buffers()) f.push_back({"buffer/" + name, *t});
        return f;
    }

    static Trainer from_tensors(const TensorFile& f) {
        const auto& version = find_tensor<double>(f, "meta/version");
        if (version.size() != 1 || version[0] != double(kCheckpointVersion))
            throw FormatError("unsupported checkpoint version");
        const auto& cb = find_tensor<float>(f, "meta/config");
        std::string text;
        for (float c : cb.vec()) text.push_back(static_cast<char>(static_cast<unsigned char>(c)));
        auto u64_at = [](const Tensor<double>& t, std::size_t i) {
            if (t.size() < 2 * i + 2) throw FormatError("checkpoint integer field too short");
            return static_cast<std::uint64_t>(t[2 * i]) | (static_cast<std::uint64_t>(t[2 * i + 1]) << 32);
        };
        Trainer tr(ExperimentConfig::parse(text, "checkpoint config"), u64_at(find_tensor<double>(f, "meta/seed"), 0));
        tr.epoch_ = static_cast<int>(find_tensor<double>(f, "meta/epoch").vec().at(0));
        for (auto [name, rng] : {std::pair<const char*, Rng*>{"meta/rng_sampler", &tr.sampler_rng_},
                                 {"meta/rng_domainmix", &tr.mix_rng_}}) {
            const auto& t = find_tensor<double>(f, name);
            if (t.size() != 12) throw FormatError(std::string("checkpoint field ") + name + " has the wrong size");
            Rng::Snapshot s{{u64_at(t, 0), u64_at(t, 1), u64_at(t, 2), u64_at(t, 3)}, t[10] != 0.0, t[11], u64_at(t, 4)};
            rng->restore(s);
        }
        const auto& hist = find_tensor<double>(f, "meta/history");
        for (std::size_t i = 0; i < (hist.rank() == 2 ? hist.dim(0) : 0); ++i)
            tr.history_.push_back({static_cast<int>(hist.at(i, 0)), hist.at(i, 1), hist.at(i, 2),
                                   static_cast<std::size_t>(hist.at(i, 3))});
        tr.step_losses_ = find_tensor<double>(f, "meta/step_losses").vec();
        const auto& params = tr.net_.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            copy_into(params[i].second->value, find_tensor<float>(f, "param/" + params[i].first), params[i].first);
            copy_into(tr.momentum_[i], find_tensor<float>(f, "momentum/" + params[i].first), params[i].first);
        }
        for (const auto& [name, t] : tr.net_.buffers()) copy_into(*t, find_tensor<float>(f, "buffer/" + name), name);
        return tr;
    }

    void save(const std::string& path) const { save_tensor_file(path, to_tensors()); }
    static Trainer load(const std::string& path) { return from_tensors(load_tensor_file(path)); }

private:
    static void copy_into(Tensor<float>& dst, const Tensor<float>& src, const std::string& name) {
        if (dst.shape() != src.shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                              shape_str(dst.shape()));
        dst = src;
    }

    ExperimentConfig cfg_;
    std::uint64_t seed_;
    Network<float> net_;
    std::vector<Tensor<float>> momentum_;
    Rng sampler_rng_, mix_rng_;
    int epoch_ = 0;
    std::vector<EpochLog> history_;
    std::vector<double> step_losses_;
};

inline void save_checkpoint(const std::string& path, const Trainer& t) { t.save(path); }
inline Trainer load_checkpoint(const std::string& path) { return Trainer::load(path); }

struct RunRecord {
    ExperimentConfig config;
    std::uint64_t seed = 0;
    std::vector<EpochLog> epochs;
    double accuracy = 0;
    double wall_seconds = 0;
    std::size_t params = 0;
    std::uint64_t train_split_hash = 0, eval_split_hash = 0;

    /// One key=value block per epoch, then a summary block; blocks are
    /// separated by blank lines.
    std::string to_text() const {
        std::ostringstream os;
        for (const auto& e : epochs) {
            write_kv(os, {{"record", "epoch"},
                          {"seed", std::to_string(seed)},
                          {"epoch", std::to_string(e.epoch)},
                          {"lr", format_double(e.lr)},
                          {"train_loss", format_double(e.loss)},
                          {"steps", std::to_string(e.steps)}});
            os << '\n';
        }
        KeyValues kv{{"record", "summary"},
                     {"seed", std::to_string(seed)},
                     {"variant", to_string(config.network.variant)},
                     {"target_domain", std::to_string(config.target_domain)},
                     {"accuracy", format_double(accuracy)},
                     {"params", std::to_string(params)},
                     {"wall_seconds", format_double(wall_seconds)},
                     {"code_version", kCodeVersion},
                     {"config_hash", hex64(config.hash())},
                     {"train_split_hash", hex64(train_split_hash)},
                     {"eval_split_hash", hex64(eval_split_hash)},
                     {"pretraining", "none (trained from scratch)"}};
        // config echo, flattened to section.key
        std::string section;
        std::istringstream cfg(config.to_text());
        for (std::string line; std::getline(cfg, line);) {
            if (line.empty()) continue;
            if (line.front() == '[') {
                section = line.substr(1, line.size() - 2);
                continue;
            }
            const auto eq = line.find('=');
            kv.emplace_back("config." + section + "." + line.substr(0, eq), line.substr(eq + 1));
        }
        write_kv(os, kv);
        return os.str();
    }
};

struct RunOptions {
    std::string checkpoint_path; // written after every epoch when non-empty
    int stop_after_epoch = -1;   // stop early (for resume tests) when >= 0
    std::function<void(const EpochLog&)> on_epoch;
};

struct SplitPair {
    Dataset train, eval;
};

inline SplitPair leave_one_out(const Dataset& ds, int target) {
    if (!ds.domain_set().count(target))
        throw ConfigError("target domain " + std::to_string(target) + " is not present in the dataset");
    SplitPair s{ds.without_domain(target), ds.filter_domains({target})};
    assert_no_leakage(s.train, s.eval);
    return s;
}

/// Trains (or continues) `trainer` on the split and evaluates on the target.
inline RunRecord finish_run(Trainer& trainer, const SplitPair& split, const RunOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    bool saved = false;
    while (!trainer.finished()) {
        if (opt.stop_after_epoch >= 0 && trainer.epoch() >= opt.stop_after_epoch) break;
        const EpochLog log = trainer.train_epoch(split.train);
        if (!opt.checkpoint_path.empty()) trainer.save(opt.checkpoint_path);
        saved = true;
        if (opt.on_epoch) opt.on_epoch(log);
    }
    // zero-epoch runs still leave a loadable checkpoint
    if (!saved && !opt.checkpoint_path.empty()) trainer.save(opt.checkpoint_path);
    RunRecord r;
    r.config = trainer.config();
    r.seed = trainer.seed();
    r.epochs = trainer.history();
    r.accuracy = evaluate(trainer.network(), split.eval);
    r.params = trainer.network().parameter_count();
    r.train_split_hash = split_hash(split.train);
    r.eval_split_hash = split_hash(split.eval);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline RunRecord run_single(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& ds,
                            const RunOptions& opt = {}) {
    cfg.validate();
    const SplitPair split = leave_one_out(ds, cfg.target_domain);
    Trainer trainer(cfg, seed);
    return finish_run(trainer, split, opt);
}

struct Aggregate {
    double mean = 0, std = 0; // std uses n-1; 0 for a single value
    std::size_t n = 0;
};

inline Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    a.n = xs.size();
    if (xs.empty()) return a;
    double s = 0;
    for (double x : xs) s += x;
    a.mean = s / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - a.mean) * (x - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return a;
}

struct ExperimentResult {
    std::vector<RunRecord> runs;
    Aggregate accuracy;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds, const RunOptions& opt = {}) {
    ExperimentResult res;
    std::vector<double> acc;
    for (std::uint64_t seed : cfg.seeds) {
        res.runs.push_back(run_single(cfg, seed, ds, opt));
        acc.push_back(res.runs.back().accuracy);
    }
    res.accuracy = aggregate(acc);
    return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    return run_experiment(cfg, generate_dataset(cfg.dataset));
}

// ---- ablation table ----

struct AblationRow {
    Variant variant;
    bool domainmix;
    int target_domain;
    std::uint64_t seed;
    double accuracy;
    std::size_t params;
};

inline const char* kAblationHeader = "variant,domainmix,target_domain,seed,accuracy,params";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string s = std::string(kAblationHeader) + "\n";
    for (const auto& r : rows)
        s += to_string(r.variant) + "," + (r.domainmix ? "on" : "off") + "," + std::to_string(r.target_domain) + "," +
             std::to_string(r.seed) + "," + format_double(r.accuracy) + "," + std::to_string(r.params) + "\n";
    return s;
}

struct AblationOptions {
    std::vector<Variant> variants{Variant::static_baseline, Variant::asymmetric, Variant::identical_1x1,
                                  Variant::identical_3x3};
    std::vector<bool> domainmix{true, false};
    std::function<void(const AblationRow&)> on_row;
};

/// Runs variants x {DomainMix on, off} x seeds on the base config's split.
/// "on" uses the base DomainMix settings (probability 1 if the base has 0);
/// "off" sets the probability to 0.
inline std::vector<AblationRow> ablation_suite(const ExperimentConfig& base, const Dataset& ds,
                                               const AblationOptions& opt = {}) {
    base.validate();
    const SplitPair split = leave_one_out(ds, base.target_domain);
    std::vector<AblationRow> rows;
    for (Variant v : opt.variants)
        for (bool mix : opt.domainmix) {
            ExperimentConfig cfg = base;
            cfg.network.variant = v;
            cfg.domainmix.probability = mix ? (base.domainmix.probability > 0 ? base.domainmix.probability : 1.0) : 0.0;
            for (std::uint64_t seed : base.seeds) {
                Trainer t(cfg, seed);
                const RunRecord r = finish_run(t, split);
                rows.push_back({v, mix, base.target_domain, seed, r.accuracy, r.params});
                if (opt.on_row) opt.on_row(rows.back());
            }
        }
    return rows;
}

} // namespace ddg
