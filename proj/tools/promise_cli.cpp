#include <filesystem>
#include <fstream>
#include <iostream>


#include "CLI11.hpp"
#include "json.hpp"
#include "promise/config.hpp"
#include "promise/inference.hpp"
#include "promise/log.hpp"
#include "promise/metrics.hpp"
#include "promise/service.hpp"
#include "promise/synthetic.hpp"
#include "promise/trainer.hpp"
#include "promise/transplant.hpp"
#include "promise/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace promise;

namespace {

json read_json(const fs::path &p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    return json::parse(in);
}

void write_json(const fs::path &p, const json &j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

std::vector<PointPrompt> read_prompts(const fs::path &p, WindowPolicy *policy) {
    const auto j = read_json(p);
    std::vector<PointPrompt> out;
    for (const auto &pt : j.at("points")) {
        PointPrompt q;
        q.position = {pt.at("z").get<double>(), pt.at("y").get<double>(), pt.at("x").get<double>()};
        q.label = pt.value("label", std::string("fg")) == "bg" ? PromptLabel::background : PromptLabel::foreground;
        out.push_back(q);
    }
    if (policy && j.contains("policy")) *policy = window_policy_from_string(j.at("policy").get<std::string>());
    return out;
}

SyntheticSpec synthetic_spec_from(const json &j) {
    SyntheticSpec s;
    if (j.contains("shape")) {
        const auto v = j.at("shape").get<std::vector<int64_t>>();
        if (v.size() != 3) throw std::invalid_argument("shape needs three entries");
        s.shape = {v[0], v[1], v[2]};
    }
    s.n_blobs = j.value("n_blobs", s.n_blobs);
    if (j.contains("blob_radius_range")) s.blob_radius_range = j.at("blob_radius_range").get<std::array<double, 2>>();
    s.noise_std = j.value("noise_std", s.noise_std);
    s.contrast = j.value("contrast", s.contrast);
    s.bias_amplitude = j.value("bias_amplitude", s.bias_amplitude);
    s.boundary_roughness = j.value("boundary_roughness", s.boundary_roughness);
    return s;
}

int cmd_train(const fs::path &config, const fs::path &manifest, const fs::path &out) {
    const auto cfg = ModelConfig::load(config.string());
    auto train = load_split(manifest, Split::train, cfg.data.preprocess);
    auto val = load_split(manifest, Split::val, cfg.data.preprocess);
    log::info("training on ", train.size(), " cases, validating on ", val.size());
    std::optional<TensorArchive> pretrained;
    if (cfg.encoder.pretrained_path) pretrained = load_tensor_archive(*cfg.encoder.pretrained_path);
    Trainer trainer(cfg, std::move(train), std::move(val), pretrained);
    TrainOptions opts;
    opts.checkpoint_dir = out;
    const auto result = trainer.run(opts);
    write_json(out / "history.json", {{"loss", [&] {
                                           json a = json::array();
                                           for (const auto &s : result.steps) a.push_back(s.total);
                                           return a;
                                       }()},
                                      {"val_dice", result.val_dice},
                                      {"best_val_dice", result.best_val_dice}});
    return 0;
}

int cmd_infer(const fs::path &ckpt, const fs::path &volume, const fs::path &prompts, const fs::path &out) {
    auto ck = load_checkpoint(ckpt);
    InferenceRequest req;
    req.prompts = read_prompts(prompts, &req.policy);
    const auto v = load_volume(volume);
    const auto mask = infer_source_volume(*ck.model, v, req);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_mask(mask, out);
    log::info("wrote ", out.string(), " (", count_nonzero(mask.data), " foreground voxels)");
    return 0;
}

int cmd_eval(const fs::path &manifest, const fs::path &ckpt, const fs::path &report, double tolerance) {
    auto ck = load_checkpoint(ckpt);
    const auto cases = load_split(manifest, Split::test, ck.config.data.preprocess);
    json rows = json::array();
    double dice = 0, nsd = 0;
    for (const auto &c : cases) {
        MetricsReport r;
        r.case_id = c.id;
        r.tolerance_mm = tolerance;
        r.prompt_count = 1;
        const auto center = centroid_foreground_voxel(c.mask.data);
        if (center) {
            InferenceRequest req{c.id, {{{double((*center)[0]), double((*center)[1]), double((*center)[2])}, PromptLabel::foreground}}};
            const auto res = infer_volume(*ck.model, c.volume, req, &c.mask);
            r.dice = *res.dice;
            r.nsd = nsd_score(res.mask, c.mask.data, tolerance, c.volume.spacing);
        } else {
            r.dice = r.nsd = 1.0;
            r.prompt_count = 0;
        }
        dice += r.dice;
        nsd += r.nsd;
        rows.push_back(r.to_json());
    }
    const double n = std::max<double>(1.0, static_cast<double>(cases.size()));
    write_json(report, {{"cases", rows}, {"mean_dice", dice / n}, {"mean_nsd", nsd / n}});
    std::cout << "mean dice " << dice / n << "  mean nsd " << nsd / n << '\n';
    return 0;
}

int cmd_synth(const fs::path &spec_path, const fs::path &out_dir) {
    const auto j = spec_path.empty() ? json::object() : read_json(spec_path);
    const auto spec = synthetic_spec_from(j);
    const auto n = j.value("n_cases", 10);
    const auto seed = j.value("seed", uint64_t{0});
    fs::create_directories(out_dir);
    const auto splits = assign_splits(static_cast<std::size_t>(n), seed);
    std::vector<ManifestEntry> entries;
    for (int i = 0; i < n; ++i) {
        const auto c = generate_synthetic_case(spec, seed * 1000003ULL + static_cast<uint64_t>(i));
        char name[32];
        std::snprintf(name, sizeof name, "case_%03d", i);
        const auto img = out_dir / (std::string(name) + ".nii.gz");
        const auto lbl = out_dir / (std::string(name) + "_mask.nii.gz");
        save_volume(c.volume, img);
        save_mask(c.mask, lbl);
        entries.push_back({img, lbl, splits[static_cast<std::size_t>(i)]});
    }
    save_manifest(entries, out_dir / "manifest.json");
    log::info("wrote ", n, " cases to ", out_dir.string());
    return 0;
}

int cmd_transplant(const fs::path &checkpoint, const std::string &geometry, bool dry_run, const fs::path &out) {
    const auto archive = load_tensor_archive(checkpoint);
    const auto cfg = geometry == "tiny" ? EncoderConfig::tiny() : EncoderConfig::vit_b();
    Vit3dEncoder encoder(cfg);
    const auto report = plan_transplant(archive, *encoder);
    std::cout << report.to_json().dump(2) << '\n';
    if (!report.ok()) return 2;
    if (!dry_run) {
        transplant_pretrained(archive, *encoder);
        if (!out.empty()) {
            auto a = parameters_to_archive(*encoder);
            save_tensor_archive(a, out);
        }
    }
    return 0;
}

int cmd_serve(const fs::path &ckpt, const std::string &host, int port, std::size_t cache) {
    auto ck = load_checkpoint(ckpt);
    ServiceOptions opts;
    opts.cache_capacity = cache;
    SegmentationService service(ck.model, opts);
    service.serve_forever(host, port);
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Promptable 3D segmentation: training, inference, evaluation and serving"};
    app.require_subcommand(1);

    fs::path config, manifest, out, ckpt, volume, prompts, report, spec, out_dir, checkpoint, transplant_out;
    double tolerance = 1.0;
    bool dry_run = false;
    std::string geometry = "vit_b", host = "127.0.0.1";
    int port = 8080;
    std::size_t cache = 8;

    auto *train = app.add_subcommand("train", "train a model");
    train->add_option("--config", config, "model config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--manifest", manifest, "dataset manifest JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "output directory")->default_val("runs/latest");

    auto *infer = app.add_subcommand("infer", "segment one volume");
    infer->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    infer->add_option("--volume", volume)->required()->check(CLI::ExistingFile);
    infer->add_option("--prompts", prompts, "JSON {points: [{z, y, x, label}]}")->required()->check(CLI::ExistingFile);
    infer->add_option("--out", out, "output mask (.nii.gz)")->required();

    auto *eval = app.add_subcommand("eval", "Dice / NSD on the test split");
    eval->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    eval->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    eval->add_option("--report", report)->required();
    eval->add_option("--tolerance-mm", tolerance)->default_val(1.0);

    auto *synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--spec", spec, "synthetic spec JSON");
    synth->add_option("--out-dir", out_dir)->required();

    auto *transplant = app.add_subcommand("transplant", "map pretrained encoder weights");
    transplant->add_option("--checkpoint", checkpoint, "safetensors encoder checkpoint")->required()->check(CLI::ExistingFile);
    transplant->add_option("--geometry", geometry)->check(CLI::IsMember({"vit_b", "tiny"}))->default_val("vit_b");
    transplant->add_flag("--dry-run", dry_run);
    transplant->add_option("--out", transplant_out, "write the imported encoder parameters");

    auto *defaults = app.add_subcommand("config", "print the default model config");
    defaults->add_option("--geometry", geometry, "encoder preset")->check(CLI::IsMember({"vit_b", "tiny"}))->default_val("tiny");

    auto *serve = app.add_subcommand("serve", "HTTP inference service");
    serve->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
    serve->add_option("--host", host)->default_val("127.0.0.1");
    serve->add_option("--port", port)->default_val(8080);
    serve->add_option("--cache", cache, "volumes held in memory")->default_val(8);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(config, manifest, out);
        if (*infer) return cmd_infer(ckpt, volume, prompts, out);
        if (*eval) return cmd_eval(manifest, ckpt, report, tolerance);
        if (*synth) return cmd_synth(spec, out_dir);
        if (*transplant) return cmd_transplant(checkpoint, geometry, dry_run, transplant_out);
        if (*defaults) {
            ModelConfig c;
            if (geometry == "vit_b") c.encoder = EncoderConfig::vit_b();
            std::cout << c.to_json().dump(2) << '\n';
            return 0;
        }
        if (*serve) return cmd_serve(ckpt, host, port, cache);
    } catch (const std::exception &e) {
        log::error(e.what());
        return 1;
    }
    return 0;
}
