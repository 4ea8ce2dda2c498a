#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "promise/config.hpp"
#include "promise/model.hpp"
#include "promise/volume.hpp"
#include "promise/volume_io.hpp"

namespace promise {

/// lr0 - epoch * decrement, for 0 <= epoch < max_epochs.
double lr_at(const OptimConfig &optim, int64_t epoch);

/// A case resampled and normalised with the training-time spec.
struct TrainingCase {
    std::string id;
    Volume volume;
    LabelMask mask;
};

/// File name without the .nii / .nii.gz / .raw extension.
std::string case_id_from_path(const std::filesystem::path &p);

TrainingCase prepare_case(const Volume &v, const LabelMask &m, const PreprocessSpec &spec, const std::string &id);
std::vector<TrainingCase> load_split(const std::filesystem::path &manifest, Split split, const PreprocessSpec &spec);

struct TrainingSample {
    torch::Tensor image;  // (1, 1, S, S, S)
    torch::Tensor target; // (1, 1, S, S, S), float {0, 1}
    std::vector<PointPrompt> prompts; // model-input coordinates
    Patch patch;          // at patch resolution, after augmentation
};

/// sample_patch -> augment -> upsample_patch -> simulate_prompts for one iteration.
TrainingSample make_training_sample(const PatchSampler &sampler, const ModelConfig &cfg, uint64_t iteration);

struct StepRecord {
    int64_t step = 0;
    int64_t epoch = 0;
    std::string case_id;
    double lr = 0.0;
    double total = 0.0;
    double structural = 0.0;
    double boundary = 0.0;
};

struct TrainOptions {
    std::optional<int64_t> max_steps; // default: max_epochs * iterations_per_epoch
    bool validate_each_epoch = true;
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(const StepRecord &)> on_step;
};

struct TrainResult {
    std::vector<StepRecord> steps;
    std::vector<double> val_dice; // per completed epoch
    double best_val_dice = -1.0;
    int64_t epochs_completed = 0;
};

class Trainer {
public:
    Trainer(ModelConfig cfg, std::vector<TrainingCase> train, std::vector<TrainingCase> val = {},
            const std::optional<TensorArchive> &pretrained = std::nullopt);

    /// One optimisation step on a freshly drawn sample.
    StepRecord step();
    /// Mean volume-level Dice on the validation split with one centroid prompt per case.
    double validate();
    TrainResult run(const TrainOptions &opts = {});

    PromiseModel model() const { return model_; }
    const ModelConfig &config() const { return cfg_; }
    int64_t iteration() const { return iteration_; }
    int64_t epoch() const { return iteration_ / cfg_.optim.iterations_per_epoch; }
    /// Parameter names handed to the optimizer.
    const std::vector<std::string> &optimized_parameters() const { return optimized_names_; }

private:
    void set_lr(double lr);

    ModelConfig cfg_;
    std::vector<TrainingCase> train_;
    std::vector<TrainingCase> val_;
    std::vector<std::unique_ptr<PatchSampler>> samplers_;
    PromiseModel model_{nullptr};
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    std::vector<std::string> optimized_names_;
    int64_t iteration_ = 0;
    double current_lr_ = 0.0;
};

/// Dice on a patch centred at the mask's centroid-nearest foreground voxel, prompted with
/// that voxel, evaluated at model-input resolution.
double centered_patch_dice(PromiseModelImpl &model, const TrainingCase &c);

struct Checkpoint {
    ModelConfig config;
    PromiseModel model{nullptr};
    int64_t epoch = 0;
    int64_t iteration = 0;
    double best_val_dice = -1.0;
};

void save_checkpoint(const std::filesystem::path &path, PromiseModelImpl &model, int64_t epoch, int64_t iteration,
                     double best_val_dice);
/// When `expected` is given, architecture fields must agree; the first differing field is named.
Checkpoint load_checkpoint(const std::filesystem::path &path, const ModelConfig *expected = nullptr);

} // namespace promise
