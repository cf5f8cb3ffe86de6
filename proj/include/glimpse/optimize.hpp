#pragma once

#include "glimpse/gaussian.hpp"
#include "glimpse/guidance.hpp"
#include "glimpse/losses.hpp"
#include "glimpse/render.hpp"
#include "glimpse/scene.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace glimpse {

struct LearningRates {
  double center_start = 1e-3, center_end = 2e-6;
  double color = 2.5e-3;
  double opacity = 5e-2;
  double scale = 5e-3;
  double rotation = 1e-3;

  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-15;
};

/// Log-linear decay from center_start to center_end over `steps`, then flat.
double center_learning_rate(const LearningRates& rates, int step, int steps);

enum class Attribute : std::uint8_t { Center, Rotation, Scale, Color, Opacity };
inline constexpr int kAttributeCount = 5;

struct OptimState {
  GaussianParams<double> m, v;  // Adam moments
  int step = 0;                 // optimizer steps taken (drives the centre decay)
  /// Per-attribute update counts for bias correction; frozen attributes do not advance.
  std::array<int, kAttributeCount> updates{};
  LearningRates rates;
  int decay_steps = 1;
  Eigen::VectorXd grad_accum;  // sum of |dL/d(screen mean)| in normalized device units
  Eigen::VectorXi views;       // iterations in which the Gaussian was visible
  Mat3X<double> center_accum;  // summed centre gradients, gives the clone direction

  Eigen::Index size() const { return grad_accum.size(); }
  /// Throws ShapeMismatch unless every array tracks `n` Gaussians.
  void check(Eigen::Index n) const;
};

OptimState make_optim_state(Eigen::Index n, const LearningRates& rates, int decay_steps);

struct StepOptions {
  bool freeze_centers = false;
  std::optional<double> max_opacity;  // clamp applied after the update
};

/// One Adam update of every attribute; quaternions are renormalized afterwards.
void adam_step(OptimState& state, GaussianSet<double>& set, const GaussianGrads<double>& grads,
               const StepOptions& options = {}, const AdamConfig& adam = {});

/// Adds screen-gradient norms of visible Gaussians; `center_grads` are the
/// parameter-space centre gradients used for clone offsets.
void accumulate_densify_stats(OptimState& state, const CloudGrads<double>& screen,
                              const Mat3X<double>& center_grads);

struct DensifyConfig {
  double grad_threshold = 2e-4;  // mean normalized-device gradient
  double split_fraction = 0.01;  // of the set's extent
  double prune_opacity = 0.05;
  double human_max_scale = 0.5;          // metres
  double background_scale_fraction = 0.1;  // of the background extent

  void validate() const;
};

struct DensifyReport {
  Eigen::Index cloned = 0, split = 0;
};

/// Clones small and splits large Gaussians whose mean accumulated screen
/// gradient exceeds the threshold. Resets the accumulators.
DensifyReport densify(GaussianSet<double>& set, OptimState& state, const DensifyConfig& config, double extent,
                      std::mt19937_64& rng);

/// Removes Gaussians below `min_opacity` or with a largest scale above `max_scale`.
/// Returns the number removed; `kept` receives the surviving original indices.
Eigen::Index prune(GaussianSet<double>& set, OptimState& state, double min_opacity, double max_scale,
                   std::vector<Eigen::Index>* kept = nullptr);

/// Largest distance of a point from the centroid.
double extent_of(const Mat3X<double>& points);

struct Schedule {
  int background_iterations = 30000;
  int background_densify_interval = 100;
  int background_densify_start = 500;
  int background_densify_until = 15000;
  int warmup_iterations = 1000;  // humans without guidance
  int joint_iterations = 10000;  // with guidance
  int center_freeze = 1500;
  double opacity_clamp = 0.9;
  std::vector<int> human_densify{2000, 2500, 3000};
  int prune_interval = 500;

  int human_iterations() const { return warmup_iterations + joint_iterations; }
  void validate() const;
};

/// One training frame. Empty masks mean "all pixels".
struct Observation {
  ImageD image;   // RGB
  ImageD valid;   // 1 channel, per-pixel loss weight
  ImageD people;  // 1 channel, nonzero where humans (or occluders of them) are
};

struct TrainConfig {
  Schedule schedule;
  LearningRates rates;
  AdamConfig adam;
  DensifyConfig densify;
  LossWeights weights;
  GuidanceConfig guidance;
  RenderSettings render;
  std::uint64_t seed = 0;
  PerceptualLoss* perceptual = nullptr;

  void validate() const;
};

enum class Stage : std::uint8_t { Background, Joint };
const char* to_string(Stage stage);

struct IterationRecord {
  Stage stage = Stage::Background;
  int iteration = 0;
  int frame = 0;
  double loss = 0;
  double recon = 0;
  double mse = 0;
  double hard = 0;
  double background_reg = 0;
  double sds = 0;  // mean provider diagnostic over the humans guided
  double lambda_recon = 1;
  double tau_max = 0;
  int guided = 0;
  bool centers_frozen = false;
  double center_shift = 0;  // largest displacement of a surviving initial human centre; NaN after densify
  double max_human_opacity = 0;
  Eigen::Index background_count = 0;
  std::vector<Eigen::Index> human_counts;  // -1 for removed slots
  std::vector<std::string> events;
};

std::string to_json_line(const IterationRecord& record);

struct TrainHooks {
  std::function<void(const IterationRecord&)> on_iteration;
  /// Called every `checkpoint_interval` iterations of each stage and at the end.
  std::function<void(const Scene&, Stage, int)> on_checkpoint;
  int checkpoint_interval = 0;
  /// Receives the last finite scene before TrainingAborted is thrown.
  std::function<void(const Scene&, const IterationRecord&)> on_abort;
};

struct TrainResult {
  Scene scene;
  OptimState background_state;
  std::vector<std::optional<OptimState>> human_states;
};

/// Alpha of the humans alone at a frame, thresholded into a mask.
ImageD people_mask(const Scene& scene, int frame, double threshold = 0.02);

/// Background pre-optimization, human warmup, then joint optimization with guidance.
TrainResult train(Scene scene, const std::vector<Observation>& observations, const TrainConfig& config,
                  GuidanceProvider& provider, const TrainHooks& hooks = {});

}  // namespace glimpse
