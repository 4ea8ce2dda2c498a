// Acceptance runner: one PASS / FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "httplib.h"
#include "oracles.hpp"
#include "promise/inference.hpp"
#include "promise/log.hpp"
#include "promise/metrics.hpp"
#include "promise/objectives.hpp"
#include "promise/service.hpp"
#include "promise/synthetic.hpp"
#include "promise/trainer.hpp"
#include "promise/transplant.hpp"
#include "promise/volume_io.hpp"

using namespace promise;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    enum Status { pass, fail, skip } status = fail;
    std::string detail;
};

class Detail {
public:
    template <typename T>
    Detail &operator()(const std::string &key, const T &v) {
        if (!first_) out_ << ", ";
        out_ << key << '=' << v;
        first_ = false;
        return *this;
    }
    std::string str() const { return out_.str(); }

private:
    std::ostringstream out_;
    bool first_ = true;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Overfit geometry: tiny encoder, patch 16 upsampled x4 to 64, 8 voxel tokens (8^3 grid).
ModelConfig overfit_config() {
    ModelConfig c;
    c.encoder = EncoderConfig::tiny();
    c.encoder.spatial_patch = 8;
    c.encoder.depth_patch = 8;
    c.decoder.refine_channels = 32;
    c.data.patch_size = 16;
    c.data.model_input_size = 64;
    c.data.preprocess.foreground = ForegroundRule::above_median;
    return c;
}

SyntheticCase overfit_case() {
    SyntheticSpec spec;
    spec.shape = {32, 32, 32};
    spec.blob_radius_range = {4.0, 5.0};
    return generate_synthetic_case(spec, 1);
}

PointPrompt fg_at(const Index3 &i) {
    return {{static_cast<double>(i[0]), static_cast<double>(i[1]), static_cast<double>(i[2])}, PromptLabel::foreground};
}

std::map<std::string, torch::Tensor> snapshot(const torch::nn::Module &m) {
    std::map<std::string, torch::Tensor> out;
    for (const auto &item : m.named_parameters()) out[item.key()] = item.value().detach().clone();
    return out;
}

// ---------------------------------------------------------------------------

Outcome boundary_oracle() {
    const auto t0 = Clock::now();
    torch::manual_seed(0);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const auto m = torch::rand({16, 16, 16});
        const auto b = boundary_map(m).to(torch::kFloat64).contiguous();
        const auto ref = oracle::boundary_map(m, 5);
        const double *bp = b.data_ptr<double>();
        for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, std::abs(bp[k] - ref[k]));
    }
    bool symmetric = true;
    for (int i = 0; i < 100; ++i) {
        const auto m = (torch::rand({16, 16, 16}) > 0.5).to(torch::kFloat32);
        symmetric = symmetric && torch::equal(boundary_map(m), boundary_map(1 - m));
    }
    auto single = torch::zeros({7, 7, 7});
    single.index_put_({3, 3, 3}, 1.0);
    const double centre = boundary_map(single).index({3, 3, 3}).item<double>();
    const double secs = seconds_since(t0);
    const bool ok = worst <= 1e-6 && symmetric && std::abs(centre - (1.0 - 1.0 / 125.0)) <= 1e-6 && secs < 30;
    return {ok ? Outcome::pass : Outcome::fail,
            Detail()("max_err", worst)("complement_exact", symmetric)("single_voxel", centre)("seconds", secs).str()};
}

Outcome metric_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(0);
    std::uniform_real_distribution<double> tol(0.0, 3.0);
    std::bernoulli_distribution coin(0.5);
    int dice_mismatch = 0;
    double nsd_err = 0;
    for (int t = 0; t < 100; ++t) {
        auto make = [&] {
            MaskArray3 m({12, 12, 12});
            if (coin(rng)) {
                std::bernoulli_distribution b(0.3);
                for (auto &v : m.values()) v = b(rng);
            } else {
                std::uniform_int_distribution<int64_t> u(0, 11);
                for (int box = 0; box < 2; ++box) {
                    Index3 lo{}, hi{};
                    for (std::size_t a = 0; a < 3; ++a) {
                        const auto p = u(rng), q = u(rng);
                        lo[a] = std::min(p, q);
                        hi[a] = std::max(p, q);
                    }
                    for (int64_t z = lo[0]; z <= hi[0]; ++z)
                        for (int64_t y = lo[1]; y <= hi[1]; ++y)
                            for (int64_t x = lo[2]; x <= hi[2]; ++x) m(z, y, x) = 1;
                }
            }
            return m;
        };
        const auto a = make(), b = make();
        const Spacing sp{t % 2 ? 1.0 : 2.0, 1.0, t % 3 ? 1.0 : 0.6};
        const double tau = tol(rng);
        dice_mismatch += dice_score(a, b) != oracle::dice(a, b);
        nsd_err = std::max(nsd_err, std::abs(nsd_score(a, b, tau, sp) - oracle::nsd(a, b, tau, sp)));
    }
    const double secs = seconds_since(t0);
    const bool ok = dice_mismatch == 0 && nsd_err <= 1e-9 && secs < 120;
    return {ok ? Outcome::pass : Outcome::fail,
            Detail()("dice_mismatches", dice_mismatch)("nsd_max_err", nsd_err)("seconds", secs).str()};
}

Outcome gradient_check() {
    torch::manual_seed(1);
    auto logits = (torch::randn({8, 8, 8}, torch::kFloat64) * 2).set_requires_grad(true);
    const auto target = (torch::rand({8, 8, 8}) > 0.5).to(torch::kFloat64);
    const LossWeights w{1.0, 10.0};
    total_loss(logits, target, w).total.backward();
    const auto grad = logits.grad().view(-1);
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int64_t> u(0, 511);
    const double h = 1e-5;
    double worst = 0;
    int checked = 0, attempts = 0;
    torch::NoGradGuard g;
    while (checked < 20 && attempts++ < 1000) {
        const auto i = u(rng);
        const double analytic = grad[i].item<double>();
        if (std::abs(analytic) < 1e-8) continue;
        auto plus = logits.detach().clone().view(-1), minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        const double numeric = (total_loss(plus.view({8, 8, 8}), target, w).total.item<double>() -
                                total_loss(minus.view({8, 8, 8}), target, w).total.item<double>()) /
                               (2 * h);
        worst = std::max(worst, std::abs(numeric - analytic) / std::abs(analytic));
        ++checked;
    }
    const bool ok = checked == 20 && worst <= 1e-4;
    return {ok ? Outcome::pass : Outcome::fail, Detail()("coordinates", checked)("max_rel_err", worst).str()};
}

Outcome adapter_identity_freezing() {
    torch::manual_seed(2);
    auto enc_cfg = EncoderConfig::tiny();
    Vit3dEncoder adapted(enc_cfg);
    auto plain_cfg = enc_cfg;
    plain_cfg.use_adapters = false;
    Vit3dEncoder plain(plain_cfg);
    copy_matching_parameters(*plain, *adapted);
    double identity_err = 0;
    {
        torch::NoGradGuard g;
        const auto x = torch::randn({1, 1, 64, 64, 64});
        const auto a = adapted->forward(x), b = plain->forward(x);
        for (std::size_t i = 0; i < a.size(); ++i)
            identity_err = std::max(identity_err, (a[i].tokens - b[i].tokens).abs().max().item<double>());
    }

    const auto cfg = overfit_config();
    const auto c = overfit_case();
    Trainer trainer(cfg, {prepare_case(c.volume, c.mask, cfg.data.preprocess, "case")});
    const auto before = snapshot(*trainer.model());
    for (int i = 0; i < 5; ++i) trainer.step();
    const auto partition = trainer.model()->partition();
    int frozen_moved = 0, trainable_changed = 0;
    for (const auto &item : trainer.model()->named_parameters()) {
        const bool same = torch::equal(item.value(), before.at(item.key()));
        if (partition.is_frozen(item.key())) frozen_moved += !same;
        else trainable_changed += !same;
    }
    const double changed_frac = static_cast<double>(trainable_changed) / static_cast<double>(partition.trainable.size());
    const bool ok = identity_err <= 1e-6 && frozen_moved == 0 && changed_frac >= 0.95;
    return {ok ? Outcome::pass : Outcome::fail, Detail()("identity_max_err", identity_err)("frozen_changed", frozen_moved)(
                                                    "frozen_tensors", partition.frozen.size())("trainable_changed_frac", changed_frac)
                                                    .str()};
}

struct OverfitState {
    PromiseModel model{nullptr};
    TrainingCase training_case;
};

Outcome overfit(OverfitState &state, int steps) {
    const auto t0 = Clock::now();
    const auto cfg = overfit_config();
    const auto c = overfit_case();
    state.training_case = prepare_case(c.volume, c.mask, cfg.data.preprocess, "case");
    Trainer trainer(cfg, {state.training_case});
    double best = std::numeric_limits<double>::infinity();
    int improvements = 0;
    for (int i = 0; i < steps; ++i) {
        const auto r = trainer.step();
        if (r.total < best) {
            best = r.total;
            ++improvements;
        }
    }
    state.model = trainer.model();
    const double train_dice = centered_patch_dice(*state.model, state.training_case);
    const auto centre = *centroid_foreground_voxel(state.training_case.mask.data);
    const auto res = infer_volume(*state.model, state.training_case.volume, {"case", {fg_at(centre)}},
                                  &state.training_case.mask);
    const double secs = seconds_since(t0);
    const bool ok = train_dice >= 0.90 && *res.dice >= 0.85 && secs <= 15 * 60 && improvements >= 10;
    return {ok ? Outcome::pass : Outcome::fail, Detail()("steps", steps)("train_dice", train_dice)("infer_dice", *res.dice)(
                                                    "loss_improvements", improvements)("seconds", secs)
                                                    .str()};
}

Outcome prompt_sensitivity(OverfitState &state) {
    if (!state.model) return {Outcome::fail, "overfit model unavailable"};
    const auto &tc = state.training_case;
    const auto centre = *centroid_foreground_voxel(tc.mask.data);
    // background voxel farthest from the target
    const auto d2 = squared_distance_transform(tc.mask.data, tc.mask.spacing);
    const auto far = tc.mask.data.unravel(static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin()));
    Detail detail;
    detail("inside", Shape3{centre[0], centre[1], centre[2]}.str())("far", Shape3{far[0], far[1], far[2]}.str());
    bool ok = true;
    for (auto policy : {WindowPolicy::prompt_centered, WindowPolicy::tiled}) {
        const auto a = infer_volume(*state.model, tc.volume, {"case", {fg_at(centre)}, policy});
        const auto b = infer_volume(*state.model, tc.volume, {"case", {fg_at(far)}, policy});
        const double d = dice_score(a.mask, b.mask);
        detail("dice_between_" + to_string(policy), d);
        if (policy == WindowPolicy::prompt_centered) ok = d < 0.99;
    }
    return {ok ? Outcome::pass : Outcome::fail, detail.str()};
}

Outcome ablation_matrix() {
    const auto base = overfit_config();
    const auto c = overfit_case();
    const auto tc = prepare_case(c.volume, c.mask, base.data.preprocess, "case");
    const auto centre = *centroid_foreground_voxel(tc.mask.data);
    std::map<std::string, int64_t> params;
    Detail detail;
    bool ok = true;
    for (const auto &row : ablation_rows(base)) {
        try {
            Trainer t(row.config, {tc});
            t.step();
            t.step();
            const auto r = infer_volume(*t.model(), tc.volume, {"case", {fg_at(centre)}});
            ok = ok && r.mask.shape() == tc.volume.shape();
            params[row.name] = count_parameters(*t.model());
        } catch (const std::exception &e) {
            ok = false;
            detail(row.name, std::string("error: ") + e.what());
        }
    }
    // architecture changes between consecutive rows; R/C rows differ only in the loss
    const std::vector<std::string> distinct{"baseline", "+two_adapters", "+up_conv", "R", "C"};
    std::set<int64_t> counts;
    for (const auto &n : distinct) counts.insert(params[n]);
    ok = ok && counts.size() == distinct.size() && params["R"] == params["R-B"] && params["C"] == params["C-B"];

    // up-conv kernels: one (ch, ch, 2, 2, 2) transposed conv plus bias per stage; no CNN in these rows, so ch = R
    const auto r = base.decoder.refine_channels;
    int64_t expected = 0;
    for (int64_t stride = base.token_extent() / 2; stride > 1; stride /= 2) expected += r * r * 8 + r;
    const auto delta = params["+up_conv"] - params["+two_adapters"];
    ok = ok && delta == expected;
    for (const auto &[n, p] : params) detail(n, p);
    detail("upconv_delta", delta)("expected_delta", expected);
    return {ok ? Outcome::pass : Outcome::fail, detail.str()};
}

Outcome schedule() {
    const OptimConfig o;
    bool ok = lr_at(o, 0) == 4e-4 && std::abs(lr_at(o, 100) - 2e-4) < 1e-15 && o.max_epochs == 200;
    bool enforced = false;
    try {
        lr_at(o, 200);
    } catch (const std::out_of_range &) {
        enforced = true;
    }
    auto cfg = overfit_config();
    cfg.optim.max_epochs = 1;
    cfg.optim.iterations_per_epoch = 1;
    const auto c = overfit_case();
    Trainer t(cfg, {prepare_case(c.volume, c.mask, cfg.data.preprocess, "case")});
    t.step();
    bool trainer_stops = false;
    try {
        t.step();
    } catch (const std::out_of_range &) {
        trainer_stops = true;
    }
    ok = ok && enforced && trainer_stops;
    return {ok ? Outcome::pass : Outcome::fail, Detail()("lr_0", lr_at(o, 0))("lr_100", lr_at(o, 100))(
                                                    "lr_200_rejected", enforced)("trainer_stops_at_max_epochs", trainer_stops)
                                                    .str()};
}

Outcome sampler_statistics() {
    const auto c = overfit_case();
    const PatchSampler sampler(c.volume, c.mask, 16);
    int fg = 0;
    for (uint64_t s = 0; s < 10000; ++s) fg += c.mask.data[sampler.sample(s).center] != 0;
    const double frac = fg / 10000.0;

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> density(0.0, 0.02);
    int violations = 0;
    for (int t = 0; t < 1000; ++t) {
        MaskArray3 m({8, 8, 8});
        if (t % 4 != 0) {
            std::bernoulli_distribution b(density(rng));
            for (auto &v : m.values()) v = b(rng);
        }
        const bool any = count_nonzero(m) > 0;
        const auto pts = simulate_prompts(m, 10, static_cast<uint64_t>(t));
        if (pts.size() != 10) ++violations;
        for (const auto &p : pts) {
            const Index3 i{static_cast<int64_t>(p.position[0]), static_cast<int64_t>(p.position[1]),
                           static_cast<int64_t>(p.position[2])};
            const bool label_fg = p.label == PromptLabel::foreground;
            if (label_fg != any || (m[i] != 0) != any) ++violations;
        }
    }
    const bool ok = frac >= 0.47 && frac <= 0.53 && violations == 0;
    return {ok ? Outcome::pass : Outcome::fail, Detail()("fg_centre_fraction", frac)("prompt_violations", violations).str()};
}

Outcome checkpoint_api(const OverfitState &state) {
    const auto cfg = overfit_config();
    PromiseModel model = state.model ? state.model : PromiseModel(cfg, 5);
    const auto dir = fs::temp_directory_path() / "promise_acceptance";
    fs::create_directories(dir);
    save_checkpoint(dir / "model.safetensors", *model, 0, 0, -1);
    auto ck = load_checkpoint(dir / "model.safetensors", &cfg);
    torch::manual_seed(6);
    const auto probe = torch::randn({1, 1, 64, 64, 64});
    const std::vector<std::vector<PointPrompt>> prompts{{{{30.0, 31.0, 32.0}, PromptLabel::foreground}}};
    bool same = false;
    {
        torch::NoGradGuard g;
        model->eval();
        ck.model->eval();
        same = torch::equal(model->forward(probe, prompts).logits, ck.model->forward(probe, prompts).logits);
        model->train();
    }

    const auto c = overfit_case();
    SegmentationService service(ck.model);
    const int port = service.start();
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(300, 0);
    bool api_same = false;
    std::string error;
    const auto centre = *centroid_foreground_voxel(c.mask.data);
    if (auto up = client.Post("/volumes", encode_nifti(c.volume, true), "application/octet-stream"); up && up->status == 201) {
        const std::string vid = nlohmann::json::parse(up->body)["volume_id"];
        const nlohmann::json body = {{"points", {{{"z", centre[0]}, {"y", centre[1]}, {"x", centre[2]}, {"label", "fg"}}}}};
        if (auto seg = client.Post("/volumes/" + vid + "/segment", body.dump(), "application/json"); seg && seg->status == 200) {
            const std::string mid = nlohmann::json::parse(seg->body)["mask_id"];
            auto nifti = client.Get("/masks/" + mid);
            const auto direct = infer_source_volume(*ck.model, c.volume, {vid, {fg_at(centre)}});
            if (nifti && nifti->status == 200) {
                const auto served = decode_nifti(nifti->body);
                api_same = served.shape() == direct.shape();
                for (std::size_t i = 0; api_same && i < direct.data.size(); ++i)
                    api_same = served.data.values()[i] == static_cast<float>(direct.data.values()[i]);
            } else {
                error = "mask download failed";
            }
        } else {
            error = "segment request failed";
        }
    } else {
        error = "upload failed";
    }
    service.stop();
    Detail d;
    d("reload_bit_identical", same)("api_equals_library", api_same);
    if (!error.empty()) d("error", error);
    return {same && api_same ? Outcome::pass : Outcome::fail, d.str()};
}

Outcome vitb_transplant(const std::string &path) {
    if (path.empty()) return {Outcome::skip, "no ViT-B checkpoint supplied (--vitb-checkpoint or PROMISE_VITB_CHECKPOINT)"};
    const auto src = load_tensor_archive(path);
    auto cfg = EncoderConfig::vit_b();
    Vit3dEncoder enc(cfg);
    const auto report = plan_transplant(src, *enc);
    if (!report.ok()) return {Outcome::fail, "transplant report: " + report.to_json().dump()};
    const auto partition = transplant_pretrained(src, *enc);
    const auto params = enc->named_parameters();
    int mismatched = 0;
    for (const auto &name : partition.frozen) {
        if (name == "patch_embed.spatial.weight" || name == "patch_embed.pos_embed") continue;
        auto key = source_key_for(name);
        if (!src.contains(key)) key = key.substr(key.find('.') + 1); // unprefixed checkpoint
        if (!torch::equal(params[name], src.at(key).to(torch::kFloat32))) ++mismatched;
    }
    torch::NoGradGuard g;
    torch::manual_seed(7);
    const auto gray = torch::randn({128, 128});
    const auto volume = gray.expand({cfg.depth_patch, 128, 128}).contiguous().view({1, 1, cfg.depth_patch, 128, 128});
    const auto taps = enc->forward(volume);
    const auto ref = oracle::vit2d_forward(src, gray, cfg.spatial_patch, cfg.n_blocks, cfg.n_heads);
    const auto last = taps.back().tokens[0][0].to(torch::kFloat64);
    const double err = (last - ref.back()).abs().max().item<double>();
    const bool ok = mismatched == 0 && err <= 1e-5;
    return {ok ? Outcome::pass : Outcome::fail,
            Detail()("frozen_mismatches", mismatched)("depth1_2d_max_err", err)("note", "relative-position bias omitted").str()};
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"acceptance criteria runner"};
    std::string vitb = std::getenv("PROMISE_VITB_CHECKPOINT") ? std::getenv("PROMISE_VITB_CHECKPOINT") : "";
    std::vector<std::string> only;
    int steps = 300;
    app.add_option("--vitb-checkpoint", vitb, "safetensors file with SAM ViT-B image-encoder weights");
    app.add_option("--only", only, "run only the named criteria");
    app.add_option("--overfit-steps", steps, "training steps for the overfit run")->check(CLI::Range(1, 300));
    CLI11_PARSE(app, argc, argv);

    torch::set_num_threads(1);
    log::set_quiet(true);

    OverfitState state;
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"boundary_map_oracle", boundary_oracle},
        {"metric_oracles", metric_oracles},
        {"loss_gradient_check", gradient_check},
        {"adapter_identity_and_freezing", adapter_identity_freezing},
        {"overfit_run", [&] { return overfit(state, steps); }},
        {"prompt_sensitivity", [&] { return prompt_sensitivity(state); }},
        {"ablation_matrix", ablation_matrix},
        {"lr_schedule", schedule},
        {"sampler_statistics", sampler_statistics},
        {"checkpoint_and_api_equivalence", [&] { return checkpoint_api(state); }},
        {"vitb_transplant", [&] { return vitb_transplant(vitb); }},
    };

    int failures = 0;
    for (const auto &[name, run] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception &e) {
            o = {Outcome::fail, std::string("exception: ") + e.what()};
        }
        const char *tag = o.status == Outcome::pass ? "PASS" : (o.status == Outcome::skip ? "SKIP" : "FAIL");
        std::cout << '[' << tag << "] " << name << ": " << o.detail << std::endl;
        failures += o.status == Outcome::fail;
    }
    return failures == 0 ? 0 : 1;
}
