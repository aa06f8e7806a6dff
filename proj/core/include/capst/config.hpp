#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "capst/errors.hpp"
#include "capst/model.hpp"
#include "capst/train.hpp"

namespace capst {

// Flat `key = value` config with # comments and dotted keys. Every field
// has a documented default; unknown keys are rejected.
class RunConfig {
public:
    // model
    std::size_t input_size = 112;
    // backbone
    std::size_t backbone_depth = 26;   // 18/22/26/30/34
    std::string backbone_stages;       // explicit override, e.g. "8|16|16,16"
    bool freeze_backbone = false;
    // capsule
    std::size_t num_primary = 3;
    std::size_t routing_iters = 3;
    std::size_t output_dim = 256;
    std::size_t conv_channels = 64;
    std::size_t conv1d_channels = 2;
    std::size_t conv1d_kernel = 1;
    std::size_t sa_kernel = 7;
    bool squash_uhat = true;
    bool bn_frame_stats = true;
    double squash_epsilon = 1e-8;
    // fusion
    std::size_t num_frames = 10;
    std::size_t ta_hidden = 64;
    std::size_t num_classes = 5;
    std::string ta_gate = "relu";
    double alpha_epsilon = 1e-8;
    // train
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 10;
    std::size_t epochs = 300;
    std::uint64_t seed = 0;
    std::size_t precision = 32;
    std::size_t checkpoint_every = 0;  // epochs; 0 = final only
    bool decay_bn = true;
    double train_fraction = 0.7;
    // paths
    std::string manifest;
    std::string out_dir = "out";

    void set(const std::string& key, const std::string& value) {
        if (!assign(key, value)) throw config_error("unknown config key: " + key);
    }

    void load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw config_error("config: cannot open " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw config_error(path + ":" + std::to_string(lineno) +
                                   ": expected `key = value`");
            }
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) {
                throw config_error(path + ":" + std::to_string(lineno) + ": empty key");
            }
            try {
                set(key, value);
            } catch (const config_error& e) {
                throw config_error(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    // Fully-resolved `key = value` echo (every key, current values).
    std::string serialize() const {
        std::ostringstream os;
        os.precision(17);
        for (const auto& [key, get] : fields()) os << key << " = " << get(*this) << '\n';
        return os.str();
    }

    ModelConfig model_config() const {
        ModelConfig cfg;
        cfg.input_size = input_size;
        cfg.freeze_backbone = freeze_backbone;
        cfg.backbone.stage_channels = resolve_stages();
        cfg.capsule.num_primary = num_primary;
        cfg.capsule.num_output = num_classes;
        cfg.capsule.output_dim = output_dim;
        cfg.capsule.routing_iters = routing_iters;
        cfg.capsule.squash_epsilon = squash_epsilon;
        cfg.capsule.conv_channels = conv_channels;
        cfg.capsule.conv1d_channels = conv1d_channels;
        cfg.capsule.conv1d_kernel = conv1d_kernel;
        cfg.capsule.sa_kernel = sa_kernel;
        cfg.capsule.squash_uhat = squash_uhat;
        cfg.capsule.bn_frame_stats = bn_frame_stats;
        cfg.fusion.num_frames = num_frames;
        cfg.fusion.feature_dim = output_dim;
        cfg.fusion.ta_hidden = ta_hidden;
        cfg.fusion.num_classes = num_classes;
        cfg.fusion.alpha_epsilon = alpha_epsilon;
        if (ta_gate == "relu") {
            cfg.fusion.ta_gate = TaGate::relu;
        } else if (ta_gate == "sigmoid") {
            cfg.fusion.ta_gate = TaGate::sigmoid;
        } else {
            throw config_error("fusion.ta_gate must be relu or sigmoid, got " + ta_gate);
        }
        cfg.validate();
        return cfg;
    }

    TrainConfig train_config() const {
        TrainConfig cfg;
        cfg.lr = lr;
        cfg.momentum = momentum;
        cfg.weight_decay = weight_decay;
        cfg.batch_size = batch_size;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.decay_bn = decay_bn;
        cfg.validate();
        return cfg;
    }

    std::vector<std::vector<std::size_t>> resolve_stages() const {
        if (!backbone_stages.empty()) return parse_stages(backbone_stages);
        switch (backbone_depth) {
            case 18: return {{64, 64}, {128, 128}, {256, 256}};
            case 22: return {{64, 64}, {128, 128}, {256, 256, 256}};
            case 26: return {{64, 64}, {128, 128}, {256, 256, 256, 256}};
            case 30: return {{64, 64}, {128, 128}, {256, 256, 256, 256}, {512, 512}};
            case 34: return {{64, 64}, {128, 128}, {256, 256, 256, 256}, {512, 512, 512, 512}};
            default:
                throw config_error("backbone.depth must be one of 18/22/26/30/34, got " +
                                   std::to_string(backbone_depth));
        }
    }

    // "64,64|128,128|256,256" -> stage channel lists.
    static std::vector<std::vector<std::size_t>> parse_stages(const std::string& s) {
        std::vector<std::vector<std::size_t>> stages;
        std::istringstream ss(s);
        std::string stage;
        while (std::getline(ss, stage, '|')) {
            std::vector<std::size_t> chans;
            std::istringstream cs(stage);
            std::string tok;
            while (std::getline(cs, tok, ',')) {
                try {
                    const long v = std::stol(trim(tok));
                    if (v <= 0) throw config_error("");
                    chans.push_back(static_cast<std::size_t>(v));
                } catch (const std::exception&) {
                    throw config_error("backbone.stages: bad channel '" + tok + "'");
                }
            }
            if (chans.empty()) throw config_error("backbone.stages: empty stage");
            stages.push_back(std::move(chans));
        }
        if (stages.empty()) throw config_error("backbone.stages: empty plan");
        return stages;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static bool parse_bool(const std::string& v, const std::string& key) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw config_error(key + " must be true or false, got " + v);
    }

    bool assign(const std::string& key, const std::string& v) {
        try {
            if (key == "model.input_size") input_size = std::stoul(v);
            else if (key == "backbone.depth") backbone_depth = std::stoul(v);
            else if (key == "backbone.stages") backbone_stages = v;
            else if (key == "backbone.freeze") freeze_backbone = parse_bool(v, key);
            else if (key == "capsule.num_primary") num_primary = std::stoul(v);
            else if (key == "capsule.routing_iters") routing_iters = std::stoul(v);
            else if (key == "capsule.output_dim") output_dim = std::stoul(v);
            else if (key == "capsule.conv_channels") conv_channels = std::stoul(v);
            else if (key == "capsule.conv1d_channels") conv1d_channels = std::stoul(v);
            else if (key == "capsule.conv1d_kernel") conv1d_kernel = std::stoul(v);
            else if (key == "capsule.sa_kernel") sa_kernel = std::stoul(v);
            else if (key == "capsule.squash_uhat") squash_uhat = parse_bool(v, key);
            else if (key == "capsule.bn_frame_stats") bn_frame_stats = parse_bool(v, key);
            else if (key == "capsule.squash_epsilon") squash_epsilon = std::stod(v);
            else if (key == "fusion.num_frames") num_frames = std::stoul(v);
            else if (key == "fusion.ta_hidden") ta_hidden = std::stoul(v);
            else if (key == "fusion.num_classes") num_classes = std::stoul(v);
            else if (key == "fusion.ta_gate") ta_gate = v;
            else if (key == "fusion.alpha_epsilon") alpha_epsilon = std::stod(v);
            else if (key == "train.lr") lr = std::stod(v);
            else if (key == "train.momentum") momentum = std::stod(v);
            else if (key == "train.weight_decay") weight_decay = std::stod(v);
            else if (key == "train.batch_size") batch_size = std::stoul(v);
            else if (key == "train.epochs") epochs = std::stoul(v);
            else if (key == "train.seed") seed = std::stoull(v);
            else if (key == "train.precision") precision = std::stoul(v);
            else if (key == "train.checkpoint_every") checkpoint_every = std::stoul(v);
            else if (key == "train.decay_bn") decay_bn = parse_bool(v, key);
            else if (key == "data.train_fraction") train_fraction = std::stod(v);
            else if (key == "data.manifest") manifest = v;
            else if (key == "out.dir") out_dir = v;
            else return false;
        } catch (const config_error&) {
            throw;
        } catch (const std::exception&) {
            throw config_error("bad value for " + key + ": " + v);
        }
        if (key == "train.precision" && precision != 32 && precision != 64) {
            throw config_error("train.precision must be 32 or 64");
        }
        return true;
    }

    using Getter = std::string (*)(const RunConfig&);
    static const std::vector<std::pair<std::string, Getter>>& fields();
};

inline const std::vector<std::pair<std::string, RunConfig::Getter>>& RunConfig::fields() {
    auto num = [](auto v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    static const std::vector<std::pair<std::string, Getter>> f = {
        {"model.input_size", [](const RunConfig& c) { return std::to_string(c.input_size); }},
        {"backbone.depth", [](const RunConfig& c) { return std::to_string(c.backbone_depth); }},
        {"backbone.stages", [](const RunConfig& c) { return c.backbone_stages; }},
        {"backbone.freeze",
         [](const RunConfig& c) { return std::string(c.freeze_backbone ? "true" : "false"); }},
        {"capsule.num_primary", [](const RunConfig& c) { return std::to_string(c.num_primary); }},
        {"capsule.routing_iters",
         [](const RunConfig& c) { return std::to_string(c.routing_iters); }},
        {"capsule.output_dim", [](const RunConfig& c) { return std::to_string(c.output_dim); }},
        {"capsule.conv_channels",
         [](const RunConfig& c) { return std::to_string(c.conv_channels); }},
        {"capsule.conv1d_channels",
         [](const RunConfig& c) { return std::to_string(c.conv1d_channels); }},
        {"capsule.conv1d_kernel",
         [](const RunConfig& c) { return std::to_string(c.conv1d_kernel); }},
        {"capsule.sa_kernel", [](const RunConfig& c) { return std::to_string(c.sa_kernel); }},
        {"capsule.squash_uhat",
         [](const RunConfig& c) { return std::string(c.squash_uhat ? "true" : "false"); }},
        {"capsule.bn_frame_stats",
         [](const RunConfig& c) { return std::string(c.bn_frame_stats ? "true" : "false"); }},
        {"capsule.squash_epsilon",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.squash_epsilon;
             return os.str();
         }},
        {"fusion.num_frames", [](const RunConfig& c) { return std::to_string(c.num_frames); }},
        {"fusion.ta_hidden", [](const RunConfig& c) { return std::to_string(c.ta_hidden); }},
        {"fusion.num_classes", [](const RunConfig& c) { return std::to_string(c.num_classes); }},
        {"fusion.ta_gate", [](const RunConfig& c) { return c.ta_gate; }},
        {"fusion.alpha_epsilon",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.alpha_epsilon;
             return os.str();
         }},
        {"train.lr",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.lr;
             return os.str();
         }},
        {"train.momentum",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.momentum;
             return os.str();
         }},
        {"train.weight_decay",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.weight_decay;
             return os.str();
         }},
        {"train.batch_size", [](const RunConfig& c) { return std::to_string(c.batch_size); }},
        {"train.epochs", [](const RunConfig& c) { return std::to_string(c.epochs); }},
        {"train.seed", [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"train.precision", [](const RunConfig& c) { return std::to_string(c.precision); }},
        {"train.checkpoint_every",
         [](const RunConfig& c) { return std::to_string(c.checkpoint_every); }},
        {"train.decay_bn",
         [](const RunConfig& c) { return std::string(c.decay_bn ? "true" : "false"); }},
        {"data.train_fraction",
         [](const RunConfig& c) {
             std::ostringstream os;
             os.precision(17);
             os << c.train_fraction;
             return os.str();
         }},
        {"data.manifest", [](const RunConfig& c) { return c.manifest; }},
        {"out.dir", [](const RunConfig& c) { return c.out_dir; }},
    };
    (void)num;
    return f;
}

}  // namespace capst
