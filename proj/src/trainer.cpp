#include "promise/trainer.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

#include "promise/log.hpp"

#include "promise/inference.hpp"
#include "promise/metrics.hpp"
#include "promise/objectives.hpp"
#include "promise/seed.hpp"

namespace promise {

namespace {

enum SeedTag : uint64_t { kCase = 1, kPatch, kAugment, kPrompt, kInit };

torch::Tensor to_tensor(const FloatArray3 &a) {
    const auto &s = a.shape();
    return torch::from_blob(const_cast<float *>(a.data()), {1, 1, s.d, s.h, s.w}, torch::kFloat32).clone();
}

torch::Tensor to_tensor(const MaskArray3 &a) {
    const auto &s = a.shape();
    return torch::from_blob(const_cast<uint8_t *>(a.data()), {1, 1, s.d, s.h, s.w}, torch::kUInt8).to(torch::kFloat32);
}

std::vector<PointPrompt> to_model_coords(std::vector<PointPrompt> prompts, int64_t p, int64_t s) {
    for (auto &q : prompts)
        for (auto &c : q.position) c = patch_to_model_coord(c, p, s);
    return prompts;
}

} // namespace

std::string case_id_from_path(const std::filesystem::path &p) {
    auto name = p.filename().string();
    for (const char *ext : {".gz", ".nii", ".raw"})
        if (name.size() > std::strlen(ext) && name.compare(name.size() - std::strlen(ext), std::string::npos, ext) == 0)
            name.resize(name.size() - std::strlen(ext));
    return name;
}

double lr_at(const OptimConfig &optim, int64_t epoch) {
    if (epoch < 0 || epoch >= optim.max_epochs)
        throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(optim.max_epochs) + ")");
    return optim.lr0 - static_cast<double>(epoch) * optim.lr_decrement_per_epoch;
}

TrainingCase prepare_case(const Volume &v, const LabelMask &m, const PreprocessSpec &spec, const std::string &id) {
    m.validate(&v);
    TrainingCase c;
    c.id = id;
    c.volume = preprocess(v, spec);
    c.mask = resample(m, spec.target_spacing_mm);
    if (!(c.mask.shape() == c.volume.shape())) throw std::logic_error("prepare_case: resampled shapes disagree");
    return c;
}

std::vector<TrainingCase> load_split(const std::filesystem::path &manifest, Split split, const PreprocessSpec &spec) {
    std::vector<TrainingCase> out;
    for (const auto &e : load_manifest(manifest)) {
        if (e.split != split) continue;
        auto c = load_case(e.image_path, e.mask_path);
        if (!c.second) throw std::invalid_argument("manifest case " + e.image_path.string() + " has no label");
        out.push_back(prepare_case(c.first, *c.second, spec, case_id_from_path(e.image_path)));
    }
    return out;
}

TrainingSample make_training_sample(const PatchSampler &sampler, const ModelConfig &cfg, uint64_t iteration) {
    const auto seed = cfg.optim.seed;
    auto patch = sampler.sample(derive_seed(seed, 0, iteration, kPatch));
    if (cfg.data.augment) patch = augment(patch, derive_seed(seed, 0, iteration, kAugment), cfg.data.augment_spec);
    const auto p = cfg.data.patch_size, s = cfg.data.model_input_size;
    const auto up = upsample_patch(patch, s);
    TrainingSample out;
    out.image = to_tensor(up.image);
    out.target = to_tensor(up.mask);
    auto prompts = simulate_prompts(patch.mask, static_cast<int>(cfg.prompt.n_train_points),
                                    derive_seed(seed, 0, iteration, kPrompt));
    out.prompts = to_model_coords(std::move(prompts), p, s);
    out.patch = std::move(patch);
    return out;
}

Trainer::Trainer(ModelConfig cfg, std::vector<TrainingCase> train, std::vector<TrainingCase> val,
                 const std::optional<TensorArchive> &pretrained)
    : cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)) {
    cfg_.validate();
    if (train_.empty()) throw std::invalid_argument("trainer: no training cases");
    for (const auto &c : train_) samplers_.push_back(std::make_unique<PatchSampler>(c.volume, c.mask, cfg_.data.patch_size));
    model_ = PromiseModel(cfg_, derive_seed(cfg_.optim.seed, 0, 0, kInit));
    model_->load_pretrained(pretrained);

    const auto partition = model_->partition();
    std::vector<torch::Tensor> params;
    for (const auto &item : model_->named_parameters(true)) {
        if (partition.is_frozen(item.key())) continue;
        params.push_back(item.value());
        optimized_names_.push_back(item.key());
    }
    current_lr_ = lr_at(cfg_.optim, 0);
    optimizer_ = std::make_unique<torch::optim::AdamW>(
        params, torch::optim::AdamWOptions(current_lr_).weight_decay(cfg_.optim.weight_decay));
}

void Trainer::set_lr(double lr) {
    current_lr_ = lr;
    for (auto &group : optimizer_->param_groups()) static_cast<torch::optim::AdamWOptions &>(group.options()).lr(lr);
}

StepRecord Trainer::step() {
    const auto t = static_cast<uint64_t>(iteration_);
    const auto ep = epoch();
    if (ep >= cfg_.optim.max_epochs) throw std::out_of_range("training past max_epochs");
    set_lr(lr_at(cfg_.optim, ep));
    const auto ci = derive_seed(cfg_.optim.seed, 0, t, kCase) % train_.size();
    const auto sample = make_training_sample(*samplers_[ci], cfg_, t);

    model_->train();
    optimizer_->zero_grad();
    auto out = model_->forward(sample.image, {sample.prompts});
    LossTerms terms;
    try {
        terms = total_loss(out.logits, sample.target, cfg_.loss_weights, cfg_.boundary, cfg_.use_boundary_loss);
    } catch (const std::runtime_error &e) {
        std::ostringstream msg;
        msg << "training diverged at step " << iteration_ << " (epoch " << ep << ", case " << train_[ci].id
            << ", patch center " << sample.patch.center[0] << "," << sample.patch.center[1] << ","
            << sample.patch.center[2] << ", lr " << current_lr_ << "): " << e.what();
        throw std::runtime_error(msg.str());
    }
    terms.total.backward();
    optimizer_->step();

    StepRecord r{iteration_, ep, train_[ci].id, current_lr_, terms.total.item<double>(), terms.structural.item<double>(),
                 terms.boundary.item<double>()};
    ++iteration_;
    return r;
}

double Trainer::validate() {
    if (val_.empty()) return -1.0;
    double total = 0.0;
    for (const auto &c : val_) {
        const auto center = centroid_foreground_voxel(c.mask.data);
        if (!center) {
            total += 1.0; // empty target: an empty prediction is exact, prompt is undefined
            continue;
        }
        InferenceRequest req;
        req.volume_id = c.id;
        req.prompts = {{{double((*center)[0]), double((*center)[1]), double((*center)[2])}, PromptLabel::foreground}};
        total += *infer_volume(*model_, c.volume, req, &c.mask).dice;
    }
    return total / static_cast<double>(val_.size());
}

TrainResult Trainer::run(const TrainOptions &opts) {
    const auto per_epoch = cfg_.optim.iterations_per_epoch;
    const auto budget = opts.max_steps.value_or(cfg_.optim.max_epochs * per_epoch);
    TrainResult result;
    if (opts.checkpoint_dir) std::filesystem::create_directories(*opts.checkpoint_dir);
    while (iteration_ < budget && epoch() < cfg_.optim.max_epochs) {
        auto rec = step();
        if (opts.on_step) opts.on_step(rec);
        result.steps.push_back(rec);
        if (iteration_ % per_epoch != 0) continue;

        ++result.epochs_completed;
        if (opts.validate_each_epoch && !val_.empty()) {
            const double d = validate();
            result.val_dice.push_back(d);
            log::info("epoch ", rec.epoch, " lr ", rec.lr, " loss ", rec.total, " val dice ", d);
            if (d > result.best_val_dice) {
                result.best_val_dice = d;
                if (opts.checkpoint_dir)
                    save_checkpoint(*opts.checkpoint_dir / "best.safetensors", *model_, epoch(), iteration_, d);
            }
        } else {
            log::info("epoch ", rec.epoch, " lr ", rec.lr, " loss ", rec.total);
        }
    }
    if (opts.checkpoint_dir)
        save_checkpoint(*opts.checkpoint_dir / "last.safetensors", *model_, epoch(), iteration_, result.best_val_dice);
    return result;
}

double centered_patch_dice(PromiseModelImpl &model, const TrainingCase &c) {
    const auto &cfg = model.config();
    const auto center = centroid_foreground_voxel(c.mask.data);
    if (!center) throw std::invalid_argument("centered_patch_dice: case has no foreground");
    const PatchSampler sampler(c.volume, c.mask, cfg.data.patch_size);
    const auto patch = sampler.crop_at(*center);
    const auto p = cfg.data.patch_size, s = cfg.data.model_input_size;
    const auto up = upsample_patch(patch, s);
    PointPrompt prompt{{double((*center)[0] - patch.origin[0]), double((*center)[1] - patch.origin[1]),
                        double((*center)[2] - patch.origin[2])},
                       PromptLabel::foreground};
    torch::NoGradGuard guard;
    const bool was_training = model.is_training();
    model.eval();
    auto logits = model.forward(to_tensor(up.image), {to_model_coords({prompt}, p, s)}).logits;
    if (was_training) model.train();
    return dice_score(predict_mask(logits), up.mask);
}

// ---------------------------------------------------------------------------

namespace {

const char *kArchitectureKeys[] = {"encoder", "decoder", "fusion_mode", "use_cnn", "cnn_channels", "prompt"};

std::string first_difference(const nlohmann::json &a, const nlohmann::json &b, const std::string &path) {
    if (a.is_object() && b.is_object()) {
        for (const auto &item : a.items()) {
            const auto sub = path.empty() ? item.key() : path + "." + item.key();
            if (!b.contains(item.key())) return sub;
            auto d = first_difference(item.value(), b.at(item.key()), sub);
            if (!d.empty()) return d;
        }
        return {};
    }
    return a == b ? std::string{} : path;
}

} // namespace

void save_checkpoint(const std::filesystem::path &path, PromiseModelImpl &model, int64_t epoch, int64_t iteration,
                     double best_val_dice) {
    auto archive = parameters_to_archive(model);
    archive.metadata["format"] = "promise-checkpoint";
    archive.metadata["config"] = model.config().to_json().dump();
    archive.metadata["epoch"] = std::to_string(epoch);
    archive.metadata["iteration"] = std::to_string(iteration);
    archive.metadata["rng"] = nlohmann::json{{"seed", model.config().optim.seed}, {"iteration", iteration}}.dump();
    std::ostringstream dice;
    dice.precision(17);
    dice << best_val_dice;
    archive.metadata["best_val_dice"] = dice.str();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_tensor_archive(archive, path);
}

Checkpoint load_checkpoint(const std::filesystem::path &path, const ModelConfig *expected) {
    const auto archive = load_tensor_archive(path);
    const auto it = archive.metadata.find("config");
    if (it == archive.metadata.end()) throw std::runtime_error(path.string() + " is not a model checkpoint (no config)");
    Checkpoint ck;
    ck.config = ModelConfig::from_json(nlohmann::json::parse(it->second));
    if (expected) {
        const auto want = expected->to_json(), have = ck.config.to_json();
        for (const char *key : kArchitectureKeys) {
            const auto diff = first_difference(want.at(key), have.at(key), key);
            if (!diff.empty())
                throw std::runtime_error("checkpoint config mismatch at '" + diff + "': expected " +
                                         nlohmann::json(want.at(nlohmann::json::json_pointer("/" + std::string(key)))).dump() +
                                         " got " + have.at(key).dump());
        }
        if (expected->data.model_input_size != ck.config.data.model_input_size)
            throw std::runtime_error("checkpoint config mismatch at 'data.model_input_size'");
    }
    ck.model = PromiseModel(ck.config);
    auto params = ck.model->named_parameters(true);
    for (const auto &item : params) {
        if (!archive.contains(item.key())) throw std::runtime_error("checkpoint is missing parameter " + item.key());
        const auto &src = archive.at(item.key());
        if (src.sizes() != item.value().sizes())
            throw std::runtime_error("checkpoint parameter " + item.key() + " has the wrong shape");
    }
    for (const auto &[name, _] : archive.tensors)
        if (params.find(name) == nullptr) throw std::runtime_error("checkpoint has unexpected parameter " + name);
    {
        torch::NoGradGuard guard;
        for (auto &item : params) item.value().copy_(archive.at(item.key()));
    }
    auto num = [&](const char *k, double dflt) {
        const auto f = archive.metadata.find(k);
        return f == archive.metadata.end() ? dflt : std::stod(f->second);
    };
    ck.epoch = static_cast<int64_t>(num("epoch", 0));
    ck.iteration = static_cast<int64_t>(num("iteration", 0));
    ck.best_val_dice = num("best_val_dice", -1.0);
    return ck;
}

} // namespace promise
