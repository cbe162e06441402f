#pragma once

// Experiment configuration: sectioned key=value text.
//
//   [dataset]   SyntheticDatasetConfig keys
//   [network]   variant, widths, blocks_per_stage, bottleneck_div, reduction, stem_stride
//   [training]  epochs, batch_size, base_lr, momentum, weight_decay
//   [protocol]  target_domain, seeds
//   [domainmix] probability, beta_a, beta_b, supplement

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "ddg/datagen.hpp"
#include "ddg/network.hpp"
#include "ddg/serialize.hpp"
#include "ddg/text.hpp"

namespace ddg {

struct NetworkConfig {
    Variant variant = Variant::asymmetric;
    std::vector<std::size_t> widths{16, 32, 64};
    std::size_t blocks_per_stage = 2;
    std::size_t bottleneck_div = 2;
    std::size_t reduction = 4;
    std::size_t stem_stride = 1;

    bool operator==(const NetworkConfig&) const = default;
};

struct TrainingConfig {
    int epochs = 30;
    std::size_t batch_size = 48;
    double base_lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;

    bool operator==(const TrainingConfig&) const = default;
};

struct ExperimentConfig {
    SyntheticDatasetConfig dataset;
    NetworkConfig network;
    TrainingConfig training;
    int target_domain = 0;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    DomainMixOptions domainmix;

    bool operator==(const ExperimentConfig& o) const {
        return dataset == o.dataset && network == o.network && training == o.training &&
               target_domain == o.target_domain && seeds == o.seeds &&
               domainmix.probability == o.domainmix.probability && domainmix.beta_a == o.domainmix.beta_a &&
               domainmix.beta_b == o.domainmix.beta_b && domainmix.supplement == o.domainmix.supplement;
    }

    NetworkSpec network_spec() const {
        return NetworkSpec::toy(network.widths, network.blocks_per_stage, dataset.num_classes, network.variant,
                                network.bottleneck_div, network.reduction, network.stem_stride);
    }

    void validate() const {
        dataset.validate();
        if (target_domain < 0 || static_cast<std::size_t>(target_domain) >= dataset.num_domains)
            throw ConfigError("protocol.target_domain = " + std::to_string(target_domain) + " is not below num_domains " +
                              std::to_string(dataset.num_domains));
        if (seeds.empty()) throw ConfigError("protocol.seeds is empty");
        if (training.epochs < 0) throw ConfigError("training.epochs must be >= 0");
        if (training.batch_size == 0 || training.batch_size % (dataset.num_domains - 1) != 0)
            throw ConfigError("training.batch_size = " + std::to_string(training.batch_size) +
                              " is not divisible by the " + std::to_string(dataset.num_domains - 1) + " source domains");
        if (!(training.base_lr > 0)) throw ConfigError("training.base_lr must be positive");
        if (!(training.momentum >= 0 && training.momentum < 1)) throw ConfigError("training.momentum must be in [0,1)");
        if (!(training.weight_decay >= 0)) throw ConfigError("training.weight_decay must be >= 0");
        if (network.widths.empty()) throw ConfigError("network.widths is empty");
        if (network.blocks_per_stage == 0 || network.bottleneck_div == 0 || network.reduction == 0 ||
            network.stem_stride == 0)
            throw ConfigError("network block counts and ratios must be positive");
        domainmix.validate();
        network_spec().validate();
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "[dataset]\n";
        write_kv(os, dataset.to_kv());
        os << "\n[network]\n";
        write_kv(os, {{"variant", to_string(network.variant)},
                      {"widths", join_list(network.widths)},
                      {"blocks_per_stage", std::to_string(network.blocks_per_stage)},
                      {"bottleneck_div", std::to_string(network.bottleneck_div)},
                      {"reduction", std::to_string(network.reduction)},
                      {"stem_stride", std::to_string(network.stem_stride)}});
        os << "\n[training]\n";
        write_kv(os, {{"epochs", std::to_string(training.epochs)},
                      {"batch_size", std::to_string(training.batch_size)},
                      {"base_lr", format_double(training.base_lr)},
                      {"momentum", format_double(training.momentum)},
                      {"weight_decay", format_double(training.weight_decay)}});
        os << "\n[protocol]\n";
        write_kv(os, {{"target_domain", std::to_string(target_domain)}, {"seeds", join_list(seeds)}});
        os << "\n[domainmix]\n";
        write_kv(os, {{"probability", format_double(domainmix.probability)},
                      {"beta_a", format_double(domainmix.beta_a)},
                      {"beta_b", format_double(domainmix.beta_b)},
                      {"supplement", domainmix.supplement ? "true" : "false"}});
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a(to_text()); }

    /// Parses config text; keys not given keep their defaults. Unknown
    /// sections or keys are errors.
    static ExperimentConfig parse(const std::string& text, const std::string& origin = "config") {
        ExperimentConfig c;
        const auto tree = parse_ini(text, origin);
        for (const auto& [section, body] : tree) {
            if (body.empty() && !body.data().empty())
                throw ConfigError(origin + ": key '" + section + "' outside of a [section]");
            for (const auto& [key, node] : body) {
                const std::string v = node.get_value<std::string>();
                const std::string full = section + "." + key;
                if (section == "dataset") {
                    c.dataset.set(key, v);
                } else if (section == "network") {
                    if (key == "variant") c.network.variant = variant_from_string(v);
                    else if (key == "widths") {
                        c.network.widths.clear();
                        for (const auto& w : split_list(v)) c.network.widths.push_back(parse_integer<std::size_t>(full, w));
                    } else if (key == "blocks_per_stage") c.network.blocks_per_stage = parse_integer<std::size_t>(full, v);
                    else if (key == "bottleneck_div") c.network.bottleneck_div = parse_integer<std::size_t>(full, v);
                    else if (key == "reduction") c.network.reduction = parse_integer<std::size_t>(full, v);
                    else if (key == "stem_stride") c.network.stem_stride = parse_integer<std::size_t>(full, v);
                    else throw ConfigError(origin + ": unknown key '" + full + "'");
                } else if (section == "training") {
                    if (key == "epochs") c.training.epochs = parse_integer<int>(full, v);
                    else if (key == "batch_size") c.training.batch_size = parse_integer<std::size_t>(full, v);
                    else if (key == "base_lr") c.training.base_lr = parse_double(full, v);
                    else if (key == "momentum") c.training.momentum = parse_double(full, v);
                    else if (key == "weight_decay") c.training.weight_decay = parse_double(full, v);
                    else throw ConfigError(origin + ": unknown key '" + full + "'");
                } else if (section == "protocol") {
                    if (key == "target_domain") c.target_domain = parse_integer<int>(full, v);
                    else if (key == "seeds") {
                        c.seeds.clear();
                        for (const auto& s : split_list(v)) c.seeds.push_back(parse_integer<std::uint64_t>(full, s));
                    } else throw ConfigError(origin + ": unknown key '" + full + "'");
                } else if (section == "domainmix") {
                    if (key == "probability") c.domainmix.probability = parse_double(full, v);
                    else if (key == "beta_a") c.domainmix.beta_a = parse_double(full, v);
                    else if (key == "beta_b") c.domainmix.beta_b = parse_double(full, v);
                    else if (key == "supplement") c.domainmix.supplement = parse_bool(full, v);
                    else throw ConfigError(origin + ": unknown key '" + full + "'");
                } else {
                    throw ConfigError(origin + ": unknown section [" + section + "]");
                }
            }
        }
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream probe(path);
        if (!probe) throw ConfigError("config file not found: '" + path + "'");
        return parse(read_file_bytes(path), path);
    }
};

} // namespace ddg
