// capst - command-line surface for the CapST model-attribution engine.
//
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
// failure (NaN loss, failed gradient check).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capst/capst.hpp"

namespace fs = std::filesystem;
using namespace capst;

namespace {

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
    RunConfig rc;
    if (!config_path.empty()) rc.load_file(config_path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw config_error("--set expects key=value, got '" + kv + "'");
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        rc.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    return rc;
}

void echo_config(const RunConfig& rc, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream os(out_dir / "resolved.config");
    os << rc.serialize();
}

std::vector<std::string> class_names_or_default(const DatasetManifest* manifest,
                                                std::size_t n) {
    std::vector<std::string> names;
    if (manifest && manifest->class_names.size() >= n) {
        names.assign(manifest->class_names.begin(), manifest->class_names.begin() + n);
    } else {
        for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
    }
    return names;
}

template <class T>
std::vector<VideoSample<T>> load_videos(const DatasetManifest& m, std::size_t n_frames) {
    std::vector<VideoSample<T>> out(m.entries.size());
    parallel_for(m.entries.size(),
                 [&](std::size_t i) { out[i] = load_video<T>(m.entries[i], n_frames); });
    return out;
}

template <class T>
int run_train(const RunConfig& rc) {
    const fs::path out_dir = rc.out_dir;
    echo_config(rc, out_dir);
    if (rc.manifest.empty()) throw config_error("train: data.manifest is required");
    DatasetManifest manifest = load_manifest(rc.manifest);
    if (rc.train_fraction < 1.0) {
        auto [train_part, test_part] = split(manifest, rc.train_fraction, rc.seed);
        save_manifest(train_part, (out_dir / "train_manifest.csv").string());
        save_manifest(test_part, (out_dir / "test_manifest.csv").string());
        manifest = std::move(train_part);
    }

    CapstModel<T> model;
    model.init(rc.model_config(), Rng(rc.seed, 0));
    Trainer<T> trainer(model, rc.train_config());
    const std::string cfg_text = rc.serialize();

    std::ofstream log(out_dir / "train.log");
    log << "# capst training log\n";
    log << "epoch,loss,acc,seconds\n";

    std::vector<VideoSample<T>> dataset = load_videos<T>(manifest, rc.num_frames);
    trainer.save((out_dir / "initial.capst").string(), cfg_text);
    for (std::size_t e = 0; e < rc.epochs; ++e) {
        EpochLog el = trainer.train_epoch(dataset);
        log << el.epoch << ',' << el.mean_loss << ',' << el.train_accuracy << ','
            << el.seconds << '\n';
        log.flush();
        std::cout << "epoch " << el.epoch << "  loss " << el.mean_loss << "  acc "
                  << el.train_accuracy << "%  (" << el.seconds << " s)\n";
        if (rc.checkpoint_every && el.epoch % rc.checkpoint_every == 0) {
            trainer.save((out_dir / ("epoch" + std::to_string(el.epoch) + ".capst")).string(),
                         cfg_text);
        }
    }
    trainer.save((out_dir / "final.capst").string(), cfg_text);
    return 0;
}

template <class T>
CapstModel<T> model_from_checkpoint(const Checkpoint<T>& ck, RunConfig& rc_out) {
    std::istringstream cfg_stream(ck.config_text);
    const fs::path tmp = fs::temp_directory_path() / "capst_ck_config.tmp";
    {
        std::ofstream os(tmp);
        os << ck.config_text;
    }
    rc_out.load_file(tmp.string());
    fs::remove(tmp);
    CapstModel<T> model;
    model.init(rc_out.model_config(), Rng(rc_out.seed, 0));
    apply_tensors(model.params(), ck.tensors);
    return model;
}

template <class T>
int run_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& out_dir) {
    Checkpoint<T> ck = load_checkpoint_file<T>(ckpt_path);
    RunConfig rc;
    CapstModel<T> model = model_from_checkpoint<T>(ck, rc);
    DatasetManifest manifest = load_manifest(manifest_path);
    if (manifest.num_classes() > static_cast<int>(rc.num_classes)) {
        throw data_error("eval: manifest has more classes than the checkpointed model");
    }
    std::vector<VideoSample<T>> samples = load_videos<T>(manifest, rc.num_frames);
    EvalReport report = evaluate(model, samples);
    const std::string text = report.to_text(class_names_or_default(&manifest, rc.num_classes));
    std::cout << text;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream(fs::path(out_dir) / "report.txt") << text;
        std::ofstream(fs::path(out_dir) / "report.kv") << report.to_kv();
    }
    return 0;
}

template <class T>
int run_attribute(const std::string& ckpt_path, const std::string& frame_dir,
                  const std::string& manifest_path) {
    Checkpoint<T> ck = load_checkpoint_file<T>(ckpt_path);
    RunConfig rc;
    CapstModel<T> model = model_from_checkpoint<T>(ck, rc);

    std::vector<std::string> paths;
    for (const auto& ent : fs::directory_iterator(frame_dir))
        if (ent.is_regular_file()) paths.push_back(ent.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw data_error("attribute: no frames in " + frame_dir);
    if (paths.size() < rc.num_frames) {
        std::cerr << "# warning: " << paths.size() << " frames < " << rc.num_frames
                  << ", sampling cyclically\n";
    }
    ManifestEntry entry{"query", 0, paths};
    VideoSample<T> sample = load_video<T>(entry, rc.num_frames);

    model.set_training(false);
    typename Tape<T>::NoGrad off;
    Tensor<T> probs = model.forward(sample.frames).probs;

    DatasetManifest names_manifest;
    if (!manifest_path.empty()) names_manifest = load_manifest(manifest_path);
    auto names = class_names_or_default(manifest_path.empty() ? nullptr : &names_manifest,
                                        rc.num_classes);
    std::vector<std::size_t> order(probs.numel());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    for (std::size_t i : order)
        std::cout << names[i] << " " << static_cast<double>(probs[i]) << "\n";
    return 0;
}

int run_gradcheck(const RunConfig& rc, double tolerance) {
    // Always in 64-bit; finite differences are unreliable in 32-bit.
    CapstModel<double> model;
    model.init(rc.model_config(), Rng(rc.seed, 0));
    model.set_training(true);

    Rng fr = Rng(rc.seed, 0).split("gradcheck.frames");
    std::vector<Tensor<double>> frames;
    for (std::size_t t = 0; t < rc.num_frames; ++t) {
        Tensor<double> f({3, rc.input_size, rc.input_size});
        for (std::size_t i = 0; i < f.numel(); ++i) f[i] = fr.next_double();
        frames.push_back(std::move(f));
    }
    std::vector<std::pair<std::string, Tensor<double>>> inputs;
    for (auto& e : model.params().entries())
        if (e.trainable) inputs.emplace_back(e.name, e.tensor);

    auto loss = [&] {
        ForwardResult<double> fwd = model.forward(frames);
        return cross_entropy(fwd.probs, 0);
    };
    GradCheckReport report = gradcheck<double>(loss, inputs, 1e-5, tolerance);
    std::cout << (report.passed ? "PASS" : "FAIL") << " max relative error "
              << report.max_rel_error << " over " << report.checked << " coordinates";
    if (!report.passed) std::cout << " (worst " << report.worst << ")";
    std::cout << "\n";
    return report.passed ? 0 : 4;
}

int run_profile(const RunConfig& rc) {
    CapstModel<float> model;
    model.init(rc.model_config(), Rng(rc.seed, 0));
    ProfileLedger ledger = profile(model);
    std::cout << ledger.to_text() << "\n" << ledger.to_kv();
    return 0;
}

template <class T>
int run_gradcam(const std::string& ckpt_path, const std::string& frame_dir,
                const std::string& layer, int target, const std::string& out_path) {
    Checkpoint<T> ck = load_checkpoint_file<T>(ckpt_path);
    RunConfig rc;
    CapstModel<T> model = model_from_checkpoint<T>(ck, rc);

    std::vector<std::string> paths;
    for (const auto& ent : fs::directory_iterator(frame_dir))
        if (ent.is_regular_file()) paths.push_back(ent.path().string());
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw data_error("gradcam: no frames in " + frame_dir);
    ManifestEntry entry{"query", 0, paths};
    VideoSample<T> sample = load_video<T>(entry, rc.num_frames);

    std::size_t cls;
    if (target >= 0) {
        cls = static_cast<std::size_t>(target);
    } else {
        typename Tape<T>::NoGrad off;
        model.set_training(false);
        cls = argmax_class(model.forward(sample.frames).probs);
    }
    Tensor<T> heat = gradcam(model, sample, cls, layer);
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw data_error("gradcam: cannot write " + out_path);
    encode_p5(heat, os);
    std::cout << "wrote " << out_path << " (class " << cls << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CapST deep-fake model attribution engine"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic artifact-video dataset");
    std::size_t s_classes = 5, s_videos = 50, s_frames = 10, s_size = 112;
    std::uint64_t s_seed = 7;
    std::string s_out = "synth_out";
    synth->add_option("--classes", s_classes);
    synth->add_option("--videos-per-class", s_videos);
    synth->add_option("--frames", s_frames);
    synth->add_option("--size", s_size);
    synth->add_option("--seed", s_seed);
    synth->add_option("--out-dir", s_out);

    // common config plumbing
    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->add_option("--set", overrides, "override, e.g. --set train.epochs=30");
    };

    auto* train = app.add_subcommand("train", "train a model");
    add_config_opts(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a manifest");
    std::string e_ckpt, e_manifest, e_out;
    eval->add_option("--checkpoint", e_ckpt)->required();
    eval->add_option("--manifest", e_manifest)->required();
    eval->add_option("--out-dir", e_out);

    auto* attr = app.add_subcommand("attribute", "rank class probabilities for one video");
    std::string a_ckpt, a_dir, a_manifest;
    attr->add_option("--checkpoint", a_ckpt)->required();
    attr->add_option("--frame-dir", a_dir)->required();
    attr->add_option("--manifest", a_manifest, "manifest used only for class names");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full model");
    double gc_tol = 1e-4;
    add_config_opts(gc);
    gc->add_option("--tolerance", gc_tol);

    auto* prof = app.add_subcommand("profile", "parameter and MAC ledger");
    add_config_opts(prof);

    auto* cam = app.add_subcommand("gradcam", "emit a Grad-CAM heatmap as PGM");
    std::string c_ckpt, c_dir, c_layer = "backbone.stage3.conv4", c_out = "gradcam.pgm";
    int c_target = -1;
    cam->add_option("--checkpoint", c_ckpt)->required();
    cam->add_option("--frame-dir", c_dir)->required();
    cam->add_option("--layer", c_layer);
    cam->add_option("--target", c_target, "class index; default: predicted class");
    cam->add_option("--out", c_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*synth) {
            synth_generate(s_classes, s_videos, s_frames, s_size, s_seed, s_out);
            std::cout << "wrote " << s_classes * s_videos * s_frames << " frames under "
                      << s_out << "\n";
            return 0;
        }
        if (*train) {
            RunConfig rc = load_run_config(config_path, overrides);
            return rc.precision == 64 ? run_train<double>(rc) : run_train<float>(rc);
        }
        if (*eval) return run_eval<float>(e_ckpt, e_manifest, e_out);
        if (*attr) return run_attribute<float>(a_ckpt, a_dir, a_manifest);
        if (*gc) return run_gradcheck(load_run_config(config_path, overrides), gc_tol);
        if (*prof) return run_profile(load_run_config(config_path, overrides));
        if (*cam) return run_gradcam<float>(c_ckpt, c_dir, c_layer, c_target, c_out);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
