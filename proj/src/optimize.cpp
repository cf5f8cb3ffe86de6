#include "glimpse/optimize.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace glimpse {

void LearningRates::validate() const {
  for (double r : {center_start, center_end, color, opacity, scale, rotation}) {
    if (!std::isfinite(r) || r < 0) throw InvalidParameter("learning rates must be finite and nonnegative");
  }
  if (center_start > 0 && !(center_end > 0)) {
    throw InvalidParameter("the centre learning rate decays log-linearly, so its end value must be positive");
  }
}

double center_learning_rate(const LearningRates& rates, int step, int steps) {
  if (rates.center_start == 0) return 0;
  const double f = steps > 0 ? std::clamp(double(step) / steps, 0.0, 1.0) : 1.0;
  return std::exp((1 - f) * std::log(rates.center_start) + f * std::log(rates.center_end));
}

void OptimState::check(Eigen::Index n) const {
  if (m.size() != n || v.size() != n || !m.consistent() || !v.consistent() || grad_accum.size() != n ||
      views.size() != n || center_accum.cols() != n) {
    throw ShapeMismatch("optimizer state tracks " + std::to_string(m.size()) + " Gaussians, the set has " +
                        std::to_string(n));
  }
}

OptimState make_optim_state(Eigen::Index n, const LearningRates& rates, int decay_steps) {
  rates.validate();
  OptimState s;
  s.m.set_zero(n);
  s.v.set_zero(n);
  s.rates = rates;
  s.decay_steps = std::max(decay_steps, 1);
  s.grad_accum.setZero(n);
  s.views.setZero(n);
  s.center_accum.setZero(3, n);
  return s;
}

namespace {

template <typename Param, typename Grad, typename Moment>
void adam_update(Param&& p, const Grad& g, Moment& m, Moment& v, int t, double lr, const AdamConfig& adam) {
  m = adam.beta1 * m + (1 - adam.beta1) * g;
  v = adam.beta2 * v + (1 - adam.beta2) * g.cwiseAbs2();
  const double c1 = 1 - std::pow(adam.beta1, t), c2 = 1 - std::pow(adam.beta2, t);
  p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + adam.epsilon);
}

int attr(Attribute a) { return static_cast<int>(a); }

/// Keeps the listed Gaussians (in order) and their optimizer slots.
void keep(GaussianSet<double>& set, OptimState& state, const std::vector<Eigen::Index>& idx) {
  set = set.subset(idx);
  state.m = state.m.select(idx);
  state.v = state.v.select(idx);
  Eigen::VectorXd acc(static_cast<Eigen::Index>(idx.size()));
  Eigen::VectorXi views(acc.size());
  Mat3X<double> dir(3, acc.size());
  for (Eigen::Index k = 0; k < acc.size(); ++k) {
    const auto i = idx[static_cast<std::size_t>(k)];
    acc[k] = state.grad_accum[i];
    views[k] = state.views[i];
    dir.col(k) = state.center_accum.col(i);
  }
  state.grad_accum = std::move(acc);
  state.views = std::move(views);
  state.center_accum = std::move(dir);
}

void reset_stats(OptimState& state, Eigen::Index n) {
  state.grad_accum.setZero(n);
  state.views.setZero(n);
  state.center_accum.setZero(3, n);
}

}  // namespace

void adam_step(OptimState& state, GaussianSet<double>& set, const GaussianGrads<double>& grads,
               const StepOptions& options, const AdamConfig& adam) {
  const auto n = set.size();
  state.check(n);
  if (grads.size() != n || !grads.consistent()) {
    throw ShapeMismatch("gradients cover " + std::to_string(grads.size()) + " Gaussians, the set has " +
                        std::to_string(n));
  }
  auto& u = state.updates;
  const auto& r = state.rates;
  if (!options.freeze_centers) {
    const double lr = center_learning_rate(r, state.step, state.decay_steps);
    adam_update(set.centers, grads.centers, state.m.centers, state.v.centers, ++u[attr(Attribute::Center)], lr,
                adam);
  }
  adam_update(set.rotations, grads.rotations, state.m.rotations, state.v.rotations,
              ++u[attr(Attribute::Rotation)], r.rotation, adam);
  adam_update(set.log_scales, grads.log_scales, state.m.log_scales, state.v.log_scales,
              ++u[attr(Attribute::Scale)], r.scale, adam);
  adam_update(set.colors, grads.colors, state.m.colors, state.v.colors, ++u[attr(Attribute::Color)], r.color,
              adam);
  adam_update(set.opacity_logits, grads.opacity_logits, state.m.opacity_logits, state.v.opacity_logits,
              ++u[attr(Attribute::Opacity)], r.opacity, adam);
  if (options.max_opacity) {
    const double cap = logit(*options.max_opacity);
    set.opacity_logits = set.opacity_logits.cwiseMin(cap);
  }
  set.normalize_rotations();
  ++state.step;
}

void accumulate_densify_stats(OptimState& state, const CloudGrads<double>& screen,
                              const Mat3X<double>& center_grads) {
  const auto n = state.size();
  if (screen.screen_grad_norm.size() != n || screen.visible.size() != n || center_grads.cols() != n) {
    throw ShapeMismatch("densify statistics do not match the optimizer state");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!screen.visible[i]) continue;
    state.grad_accum[i] += screen.screen_grad_norm[i];
    state.views[i] += 1;
    state.center_accum.col(i) += center_grads.col(i);
  }
}

void DensifyConfig::validate() const {
  if (!(grad_threshold > 0) || !(split_fraction > 0) || !(prune_opacity >= 0 && prune_opacity < 1) ||
      !(human_max_scale > 0) || !(background_scale_fraction > 0)) {
    throw InvalidParameter("densify thresholds must be positive (prune opacity in [0, 1))");
  }
}

DensifyReport densify(GaussianSet<double>& set, OptimState& state, const DensifyConfig& config, double extent,
                      std::mt19937_64& rng) {
  const auto n = set.size();
  state.check(n);
  const double split_size = config.split_fraction * extent;
  std::vector<Eigen::Index> survivors, clones, splits;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool hot = state.views[i] > 0 && state.grad_accum[i] / state.views[i] > config.grad_threshold;
    const double size = std::exp(set.log_scales.col(i).maxCoeff());
    if (hot && size > split_size) {
      splits.push_back(i);
      continue;
    }
    survivors.push_back(i);
    if (hot) clones.push_back(i);
  }
  DensifyReport report{static_cast<Eigen::Index>(clones.size()), static_cast<Eigen::Index>(splits.size())};
  if (clones.empty() && splits.empty()) {
    reset_stats(state, n);
    return report;
  }

  GaussianParams<double> added = set.select(clones);
  for (Eigen::Index k = 0; k < added.size(); ++k) {
    // step the copy downhill by half its largest extent
    const Vec3<double> g = state.center_accum.col(clones[static_cast<std::size_t>(k)]);
    if (g.norm() > 0) added.centers.col(k) -= 0.5 * std::exp(added.log_scales.col(k).maxCoeff()) * g.normalized();
  }

  std::normal_distribution<double> normal;
  GaussianParams<double> children;
  children.resize(2 * static_cast<Eigen::Index>(splits.size()));
  Eigen::Index c = 0;
  for (const auto i : splits) {
    const Mat3<double> r = quat_to_rotation<double>(set.rotations.col(i));
    const Vec3<double> s = set.scale(i);
    for (int k = 0; k < 2; ++k, ++c) {
      Vec3<double> z;
      do {
        z = Vec3<double>(normal(rng), normal(rng), normal(rng));
      } while (z.norm() > 3.0);  // stay inside the parent's 3-sigma ellipsoid
      children.centers.col(c) = set.centers.col(i) + r * s.cwiseProduct(z);
      children.rotations.col(c) = set.rotations.col(i);
      children.log_scales.col(c) = set.log_scales.col(i).array() - std::log(1.6);
      children.colors.col(c) = set.colors.col(i);
      children.opacity_logits[c] = set.opacity_logits[i];
    }
  }
  added.append(children);

  keep(set, state, survivors);
  set.append(added);
  GaussianParams<double> zeros;
  zeros.set_zero(added.size());
  state.m.append(zeros);
  state.v.append(zeros);
  reset_stats(state, set.size());
  return report;
}

Eigen::Index prune(GaussianSet<double>& set, OptimState& state, double min_opacity, double max_scale,
                   std::vector<Eigen::Index>* kept) {
  const auto n = set.size();
  state.check(n);
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (set.opacity(i) >= min_opacity && std::exp(set.log_scales.col(i).maxCoeff()) <= max_scale) idx.push_back(i);
  }
  const auto removed = n - static_cast<Eigen::Index>(idx.size());
  if (removed > 0) keep(set, state, idx);
  if (kept) *kept = std::move(idx);
  return removed;
}

double extent_of(const Mat3X<double>& points) {
  if (points.cols() == 0) return 0;
  const Vec3<double> mid = points.rowwise().mean();
  return (points.colwise() - mid).colwise().norm().maxCoeff();
}

void Schedule::validate() const {
  if (background_iterations < 0 || warmup_iterations < 0 || joint_iterations < 0 || center_freeze < 0 ||
      background_densify_interval <= 0 || prune_interval <= 0) {
    throw InvalidParameter("schedule counts must be nonnegative and intervals positive");
  }
  if (human_iterations() > 0 && warmup_iterations >= human_iterations() && joint_iterations > 0) {
    throw InvalidParameter("warmup must be shorter than the human schedule");
  }
  if (!(opacity_clamp > 0 && opacity_clamp <= 1)) throw InvalidParameter("opacity clamp must be in (0, 1]");
}

void TrainConfig::validate() const {
  schedule.validate();
  rates.validate();
  densify.validate();
  weights.validate();
}

const char* to_string(Stage stage) { return stage == Stage::Background ? "background" : "joint"; }

std::string to_json_line(const IterationRecord& r) {
  nlohmann::json j;
  j["stage"] = to_string(r.stage);
  j["iteration"] = r.iteration;
  j["frame"] = r.frame;
  j["loss"] = r.loss;
  j["recon"] = r.recon;
  j["mse"] = r.mse;
  j["hard"] = r.hard;
  j["background_reg"] = r.background_reg;
  j["sds"] = r.sds;
  j["lambda_recon"] = r.lambda_recon;
  j["tau_max"] = r.tau_max;
  j["guided"] = r.guided;
  j["centers_frozen"] = r.centers_frozen;
  j["center_shift"] = r.center_shift;
  j["max_human_opacity"] = r.max_human_opacity;
  j["background_count"] = r.background_count;
  j["human_counts"] = r.human_counts;
  j["events"] = r.events;
  return j.dump();
}

ImageD people_mask(const Scene& scene, int frame, double threshold) {
  const auto& cam = scene.cameras.at(static_cast<std::size_t>(frame));
  GaussianCloud<double> cloud;
  cloud.resize(0);
  for (int j = 0; j < scene.slot_count(); ++j) {
    if (!scene.humans[static_cast<std::size_t>(j)]) continue;
    DeformOptions opts;
    opts.keep_jacobians = false;
    cloud.append(compose_human(scene, j, scene.human(j).pose_at(frame), opts).cloud);
  }
  ImageD mask(cam.width, cam.height, 1);
  if (cloud.size() == 0) return mask;
  const auto out = render(cloud, cam);
  for (Eigen::Index i = 0; i < mask.data.size(); ++i) mask.data[i] = out.alpha.data[i] > threshold ? 1.0 : 0.0;
  return mask;
}

namespace {

void check_mask(const ImageD& mask, const Camera<double>& cam, const char* what, int t) {
  if (mask.data.size() == 0) return;
  if (mask.width != cam.width || mask.height != cam.height || mask.channels != 1) {
    throw ShapeMismatch(std::string(what) + " mask of frame " + std::to_string(t) +
                        " must be single-channel and match the camera size");
  }
}

bool finite(const GaussianParams<double>& g) { return g.all_finite(); }

class Trainer {
public:
  Trainer(Scene scene, const std::vector<Observation>& obs, const TrainConfig& config, GuidanceProvider& provider,
          const TrainHooks& hooks)
      : scene_(std::move(scene)), obs_(obs), cfg_(config), provider_(provider), hooks_(hooks),
        frame_rng_(config.seed), guidance_rng_(config.seed ^ 0x9e3779b97f4a7c15ULL),
        densify_rng_(config.seed ^ 0xbf58476d1ce4e5b9ULL) {
    cfg_.validate();
    scene_.validate();
    if (static_cast<int>(obs_.size()) != scene_.frames) {
      throw CountMismatch("scene has " + std::to_string(scene_.frames) + " frames but " +
                          std::to_string(obs_.size()) + " observations were given");
    }
    for (int t = 0; t < scene_.frames; ++t) {
      const auto& o = obs_[static_cast<std::size_t>(t)];
      const auto& cam = scene_.cameras[static_cast<std::size_t>(t)];
      if (o.image.width != cam.width || o.image.height != cam.height || o.image.channels != 3) {
        throw ShapeMismatch("image of frame " + std::to_string(t) + " must be RGB at the camera size");
      }
      check_mask(o.valid, cam, "valid", t);
      check_mask(o.people, cam, "people", t);
    }
    for (const auto& h : scene_.humans) has_humans_ |= h.has_value();
  }

  TrainResult run() {
    const auto& sch = cfg_.schedule;
    const bool joint = has_humans_ && sch.human_iterations() > 0;
    bg_state_ = make_optim_state(scene_.background.size(), cfg_.rates,
                                 sch.background_iterations + (joint ? sch.human_iterations() : 0));
    if (scene_.background.size() > 0 && sch.background_iterations > 0) run_background();
    if (joint) run_joint();
    TrainResult out{std::move(scene_), std::move(bg_state_), std::move(human_states_)};
    return out;
  }

private:
  const Camera<double>& camera(int t) const { return scene_.cameras[static_cast<std::size_t>(t)]; }

  int draw_frame() { return std::uniform_int_distribution<int>(0, scene_.frames - 1)(frame_rng_); }

  double background_extent() const {
    Mat3X<double> pts(3, scene_.background.size() + static_cast<Eigen::Index>(scene_.cameras.size()));
    pts.leftCols(scene_.background.size()) = scene_.background.centers;
    for (std::size_t k = 0; k < scene_.cameras.size(); ++k) {
      pts.col(scene_.background.size() + static_cast<Eigen::Index>(k)) = scene_.cameras[k].position();
    }
    return extent_of(pts);
  }

  /// Loss weights for the background stage: valid pixels without people.
  const ImageD& background_mask(int t) {
    if (bg_masks_.empty()) bg_masks_.resize(obs_.size());
    auto& m = bg_masks_[static_cast<std::size_t>(t)];
    if (m) return *m;
    const auto& o = obs_[static_cast<std::size_t>(t)];
    const auto& cam = camera(t);
    ImageD mask = o.valid.data.size() ? o.valid : ImageD(cam.width, cam.height, 1, 1.0);
    const ImageD people = o.people.data.size() ? o.people : people_mask(scene_, t);
    for (Eigen::Index i = 0; i < mask.data.size(); ++i) {
      if (people.data[i] > 0) mask.data[i] = 0;
    }
    m = std::move(mask);
    return *m;
  }

  double add_background_reg(GaussianGrads<double>& grads) const {
    if (!scene_.sphere || cfg_.weights.background_reg == 0) return 0;
    const auto reg = background_sphere_reg(scene_.background, scene_.sphere->radius, scene_.sphere->center);
    grads.centers += cfg_.weights.background_reg * reg.grad;
    return cfg_.weights.background_reg * reg.value;
  }

  void fill_counts(IterationRecord& rec) const {
    rec.background_count = scene_.background.size();
    rec.human_counts.clear();
    for (const auto& h : scene_.humans) rec.human_counts.push_back(h ? h->gaussians.size() : -1);
  }

  [[noreturn]] void abort(const Scene& last_good, const IterationRecord& rec) const {
    spdlog::error("non-finite loss at {} iteration {} (frame {})", to_string(rec.stage), rec.iteration, rec.frame);
    if (hooks_.on_abort) hooks_.on_abort(last_good, rec);
    throw TrainingAborted("non-finite loss or gradient at " + std::string(to_string(rec.stage)) + " iteration " +
                          std::to_string(rec.iteration) + " (frame " + std::to_string(rec.frame) + ")");
  }

  void emit(const IterationRecord& rec, Stage stage, int it, int total) {
    if (hooks_.on_iteration) hooks_.on_iteration(rec);
    if (hooks_.on_checkpoint &&
        ((hooks_.checkpoint_interval > 0 && (it + 1) % hooks_.checkpoint_interval == 0) || it + 1 == total)) {
      hooks_.on_checkpoint(scene_, stage, it + 1);
    }
  }

  void run_background() {
    const auto& sch = cfg_.schedule;
    const double extent = background_extent();
    spdlog::info("background pre-optimization: {} iterations, {} Gaussians", sch.background_iterations,
                 scene_.background.size());
    for (int it = 0; it < sch.background_iterations; ++it) {
      IterationRecord rec;
      rec.stage = Stage::Background;
      rec.iteration = it;
      rec.frame = draw_frame();
      const auto& o = obs_[static_cast<std::size_t>(rec.frame)];
      const ImageD& mask = background_mask(rec.frame);

      const auto out = render(make_cloud(scene_.background), camera(rec.frame), cfg_.render);
      const auto recon = reconstruction_loss(out.color, o.image, cfg_.weights, &mask, cfg_.perceptual);
      const auto cg = rasterize_backward(out, recon.grad);
      auto grads = params_backward(scene_.background, cg);
      rec.recon = recon.value;
      rec.mse = mse_loss(out.color, o.image, &mask).value;
      rec.background_reg = add_background_reg(grads);
      rec.loss = rec.recon + rec.background_reg;
      if (!std::isfinite(rec.loss) || !finite(grads)) abort(scene_, rec);

      const int n = it + 1;
      const bool densifying = n <= sch.background_densify_until;
      if (densifying) accumulate_densify_stats(bg_state_, cg, grads.centers);
      adam_step(bg_state_, scene_.background, grads, {}, cfg_.adam);
      if (densifying && n >= sch.background_densify_start && n % sch.background_densify_interval == 0) {
        const auto d = densify(scene_.background, bg_state_, cfg_.densify, extent, densify_rng_);
        const auto p = prune(scene_.background, bg_state_, cfg_.densify.prune_opacity,
                             cfg_.densify.background_scale_fraction * extent);
        rec.events.push_back("densify_background");
        rec.events.push_back("prune_background");
        spdlog::debug("background densify at {}: +{} clones, {} splits, -{} pruned", n, d.cloned, d.split, p);
      }
      fill_counts(rec);
      emit(rec, Stage::Background, it, sch.background_iterations);
    }
  }

  /// Human-alone alpha of every human, pushed towards 0 or 1.
  double add_hard_surface(int t, SceneGrads& grads, double scale) const {
    double total = 0;
    const auto& cam = camera(t);
    const ImageD no_color(cam.width, cam.height, 3);
    for (int j = 0; j < scene_.slot_count(); ++j) {
      if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
      const auto comp = compose_human(scene_, j, scene_.human(j).pose_at(t));
      const auto out = render(comp.cloud, cam, cfg_.render);
      const auto hard = hard_surface_loss(out.alpha);
      total += hard.value;
      if (scale == 0) continue;
      ImageD g = hard.grad;
      g.data *= scale;
      compose_backward(scene_, comp, rasterize_backward(out, no_color, &g), grads);
    }
    return total;
  }

  void run_joint() {
    const auto& sch = cfg_.schedule;
    const auto& w = cfg_.weights;
    const int total = sch.human_iterations();
    human_states_.resize(scene_.humans.size());
    std::vector<Mat3X<double>> init_centers(scene_.humans.size());
    std::vector<double> extents(scene_.humans.size(), 0);
    for (int j = 0; j < scene_.slot_count(); ++j) {
      if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
      const auto& h = scene_.human(j);
      human_states_[static_cast<std::size_t>(j)] = make_optim_state(h.gaussians.size(), cfg_.rates, total);
      init_centers[static_cast<std::size_t>(j)] = h.gaussians.centers;
      extents[static_cast<std::size_t>(j)] = extent_of(h.mesh.vertices);
    }
    bool densified = false;  // initial centres are only tracked until the first densify
    const bool guidance_on = provider_.active() && w.sds > 0;
    spdlog::info("joint optimization: {} warmup + {} guided iterations{}", sch.warmup_iterations,
                 sch.joint_iterations, guidance_on ? "" : " (guidance disabled)");

    for (int it = 0; it < total; ++it) {
      IterationRecord rec;
      rec.stage = Stage::Joint;
      rec.iteration = it;
      rec.frame = draw_frame();
      const auto& o = obs_[static_cast<std::size_t>(rec.frame)];
      const ImageD* valid = o.valid.data.size() ? &o.valid : nullptr;
      const bool guided_stage = it >= sch.warmup_iterations;
      const int git = it - sch.warmup_iterations;
      rec.tau_max = guided_stage ? timestep_bounds(git, cfg_.guidance.timestep).tau_max : 0.0;
      rec.lambda_recon = recon_weight(it, rec.tau_max, sch.warmup_iterations);
      const double hard_scale = w.hard_factor * rec.lambda_recon;

      const auto comp = compose(scene_, rec.frame);
      const auto out = render(comp.cloud, camera(rec.frame), cfg_.render);
      const auto recon = reconstruction_loss(out.color, o.image, w, valid, cfg_.perceptual);
      rec.recon = recon.value;
      rec.mse = mse_loss(out.color, o.image, valid).value;
      const auto cg = rasterize_backward(out, recon.grad);
      SceneGrads grads = zero_grads(scene_);
      compose_backward(scene_, comp, cg, grads);

      // densify statistics come from the unweighted reconstruction gradient
      for (const auto& layer : comp.layers) {
        auto& st = *human_states_[static_cast<std::size_t>(layer.human)];
        accumulate_densify_stats(st, cg.slice(layer.offset, layer.count),
                                 grads.humans[static_cast<std::size_t>(layer.human)]->centers);
      }
      grads.background *= rec.lambda_recon;
      for (auto& g : grads.humans)
        if (g) *g *= rec.lambda_recon;

      rec.hard = add_hard_surface(rec.frame, grads, hard_scale);
      rec.background_reg = add_background_reg(grads.background);

      if (guided_stage && guidance_on) {
        double diag = 0;
        for (int j = 0; j < scene_.slot_count(); ++j) {
          if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
          const auto g = apply_guidance(scene_, j, provider_, cfg_.guidance, git, guidance_rng_);
          if (!g.applied) continue;
          auto scaled = g.grads;
          scaled *= w.sds;
          *grads.humans[static_cast<std::size_t>(j)] += scaled;
          diag += g.diagnostic;
          ++rec.guided;
        }
        if (rec.guided > 0) rec.sds = diag / rec.guided;
      }
      rec.loss = total_loss({rec.recon, rec.sds, rec.hard}, rec.lambda_recon, w).value + rec.background_reg;
      bool ok = std::isfinite(rec.loss) && finite(grads.background);
      for (const auto& g : grads.humans) ok = ok && (!g || finite(*g));
      if (!ok) abort(scene_, rec);

      rec.centers_frozen = it < sch.center_freeze;
      StepOptions human_step;
      human_step.freeze_centers = rec.centers_frozen;
      if (rec.centers_frozen) human_step.max_opacity = sch.opacity_clamp;
      if (scene_.background.size() > 0) adam_step(bg_state_, scene_.background, grads.background, {}, cfg_.adam);
      for (int j = 0; j < scene_.slot_count(); ++j) {
        if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
        adam_step(*human_states_[static_cast<std::size_t>(j)], scene_.human(j).gaussians,
                  *grads.humans[static_cast<std::size_t>(j)], human_step, cfg_.adam);
      }

      const bool densify_now = std::find(sch.human_densify.begin(), sch.human_densify.end(), it) !=
                               sch.human_densify.end();
      const bool prune_now = it > 0 && it % sch.prune_interval == 0;
      for (int j = 0; j < scene_.slot_count(); ++j) {
        if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
        auto& set = scene_.human(j).gaussians;
        auto& st = *human_states_[static_cast<std::size_t>(j)];
        if (densify_now) {
          const auto d = densify(set, st, cfg_.densify, extents[static_cast<std::size_t>(j)], densify_rng_);
          spdlog::debug("human {} densify at {}: +{} clones, {} splits", j, it, d.cloned, d.split);
          densified |= d.cloned + d.split > 0;
        }
        if (prune_now) {
          std::vector<Eigen::Index> kept;
          prune(set, st, cfg_.densify.prune_opacity, cfg_.densify.human_max_scale, &kept);
          auto& init = init_centers[static_cast<std::size_t>(j)];
          if (!densified) {
            Mat3X<double> survivors(3, static_cast<Eigen::Index>(kept.size()));
            for (std::size_t k = 0; k < kept.size(); ++k) survivors.col(static_cast<Eigen::Index>(k)) = init.col(kept[k]);
            init = std::move(survivors);
          }
        }
      }
      if (densify_now) rec.events.push_back("densify_human");
      if (prune_now) rec.events.push_back("prune_human");

      rec.center_shift = densified ? std::nan("") : 0.0;
      for (int j = 0; j < scene_.slot_count() && !densified; ++j) {
        if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
        rec.center_shift = std::max(rec.center_shift, (scene_.human(j).gaussians.centers -
                                                       init_centers[static_cast<std::size_t>(j)])
                                                          .cwiseAbs()
                                                          .maxCoeff());
      }
      for (int j = 0; j < scene_.slot_count(); ++j) {
        if (!scene_.humans[static_cast<std::size_t>(j)]) continue;
        const auto& set = scene_.human(j).gaussians;
        if (set.size() > 0) rec.max_human_opacity = std::max(rec.max_human_opacity, sigmoid(set.opacity_logits.maxCoeff()));
      }
      fill_counts(rec);
      emit(rec, Stage::Joint, it, total);
    }
  }

  Scene scene_;
  const std::vector<Observation>& obs_;
  TrainConfig cfg_;
  GuidanceProvider& provider_;
  const TrainHooks& hooks_;
  std::mt19937_64 frame_rng_, guidance_rng_, densify_rng_;
  bool has_humans_ = false;
  OptimState bg_state_;
  std::vector<std::optional<OptimState>> human_states_;
  std::vector<std::optional<ImageD>> bg_masks_;
};

}  // namespace

TrainResult train(Scene scene, const std::vector<Observation>& observations, const TrainConfig& config,
                  GuidanceProvider& provider, const TrainHooks& hooks) {
  return Trainer(std::move(scene), observations, config, provider, hooks).run();
}

}  // namespace glimpse
