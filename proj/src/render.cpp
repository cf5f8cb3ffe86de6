#include "glimpse/render.hpp"

#include <algorithm>
#include <cmath>

namespace glimpse {

namespace {

template <typename Scalar> struct TileRect {
  int x0, y0, x1, y1;  // inclusive tile range
};

template <typename Scalar>
bool tile_rect(const Splat2D<Scalar>& s, const RasterState<Scalar>& st, TileRect<Scalar>& r) {
  if (!(s.radius > 0)) return false;
  const int ts = st.settings.tile_size;
  const double lo_x = double(s.mean.x() - s.radius), hi_x = double(s.mean.x() + s.radius);
  const double lo_y = double(s.mean.y() - s.radius), hi_y = double(s.mean.y() + s.radius);
  if (hi_x < 0 || hi_y < 0 || lo_x > st.camera.width - 1 || lo_y > st.camera.height - 1) return false;
  r.x0 = std::max(0, static_cast<int>(std::floor(std::max(lo_x, 0.0) / ts)));
  r.y0 = std::max(0, static_cast<int>(std::floor(std::max(lo_y, 0.0) / ts)));
  r.x1 = std::min(st.tiles_x - 1, static_cast<int>(std::floor(std::min(hi_x, st.camera.width - 1.0) / ts)));
  r.y1 = std::min(st.tiles_y - 1, static_cast<int>(std::floor(std::min(hi_y, st.camera.height - 1.0) / ts)));
  return r.x0 <= r.x1 && r.y0 <= r.y1;
}

template <typename Scalar> void bin_tiles(RasterState<Scalar>& st) {
  const auto ntiles = static_cast<std::size_t>(st.tiles_x) * st.tiles_y;
  std::vector<std::uint32_t> counts(ntiles, 0);
  std::vector<TileRect<Scalar>> rects(st.splats.size());
  std::vector<char> hit(st.splats.size(), 0);
  for (std::size_t i = 0; i < st.splats.size(); ++i) {
    if (!tile_rect(st.splats[i], st, rects[i])) continue;
    hit[i] = 1;
    const auto& r = rects[i];
    for (int ty = r.y0; ty <= r.y1; ++ty)
      for (int tx = r.x0; tx <= r.x1; ++tx) ++counts[static_cast<std::size_t>(ty) * st.tiles_x + tx];
  }
  st.tile_offsets.assign(ntiles + 1, 0);
  for (std::size_t t = 0; t < ntiles; ++t) st.tile_offsets[t + 1] = st.tile_offsets[t] + counts[t];
  st.tile_entries.resize(st.tile_offsets.back());
  std::vector<std::uint32_t> cursor(st.tile_offsets.begin(), st.tile_offsets.end() - 1);
  // splats are already in depth order, so each tile list comes out sorted
  for (std::size_t i = 0; i < st.splats.size(); ++i) {
    if (!hit[i]) continue;
    const auto& r = rects[i];
    for (int ty = r.y0; ty <= r.y1; ++ty)
      for (int tx = r.x0; tx <= r.x1; ++tx)
        st.tile_entries[cursor[static_cast<std::size_t>(ty) * st.tiles_x + tx]++] =
            static_cast<std::uint32_t>(i);
  }
}

// Per-contribution record used by the backward sweep.
template <typename Scalar> struct Contribution {
  std::uint32_t entry;  // position within the tile list
  Scalar alpha, transmittance, gauss, dx, dy;
};

// Walks the contributors of one pixel exactly as the forward pass does.
template <typename Scalar, typename Visit>
void walk_pixel(const RasterState<Scalar>& st, std::size_t tile, int px, int py, Visit&& visit) {
  const auto begin = st.tile_offsets[tile];
  const auto end = st.tile_offsets[tile + 1];
  const Scalar min_alpha = Scalar(st.settings.min_alpha);
  const Scalar min_t = Scalar(st.settings.min_transmittance);
  Scalar t = 1;
  for (auto k = begin; k < end; ++k) {
    const auto& s = st.packed[st.tile_entries[k]];
    const Scalar dx = Scalar(px) - s.mx;
    const Scalar dy = Scalar(py) - s.my;
    const Scalar power = Scalar(-0.5) * (s.a * dx * dx + s.c * dy * dy) - s.b * dx * dy;
    if (power < s.min_power || power > 0) continue;
    const Scalar g = std::exp(power);
    const Scalar alpha = s.opacity * g;
    if (alpha < min_alpha) continue;
    const Scalar next = t * (1 - alpha);
    if (next < min_t) break;
    visit(k - begin, s, alpha, t, g, dx, dy);
    t = next;
  }
}

// View ratio x/z (or y/z) used in the perspective Jacobian, clamped to the frame widened by
// 15% per side so splats grazing the near plane off-screen do not blow up.
template <typename Scalar> struct JacobianRatio {
  Scalar value;
  bool clamped;
};

template <typename Scalar>
JacobianRatio<Scalar> jacobian_ratio(Scalar coord, Scalar iz, Scalar f, Scalar c, int size) {
  const Scalar margin = Scalar(0.15) * Scalar(size);
  const Scalar lo = (-margin - c) / f;
  const Scalar hi = (Scalar(size) + margin - c) / f;
  const Scalar r = coord * iz;
  if (r < lo) return {lo, true};
  if (r > hi) return {hi, true};
  return {r, false};
}

}  // namespace

template <typename Scalar>
std::vector<Splat2D<Scalar>> project(const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                                     const RenderSettings& settings) {
  cam.validate();
  const Scalar near = Scalar(settings.near_plane);
  const Scalar lp = Scalar(settings.low_pass);
  const Scalar log_min_alpha = std::log(Scalar(settings.min_alpha));
  std::vector<Splat2D<Scalar>> out;
  out.reserve(static_cast<std::size_t>(cloud.size()));
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const Vec3<Scalar> t = cam.to_view(cloud.centers.col(i));
    if (!(t.z() > near)) continue;
    const Scalar iz = Scalar(1) / t.z();
    const auto rx = jacobian_ratio(t.x(), iz, cam.fx, cam.cx, cam.width);
    const auto ry = jacobian_ratio(t.y(), iz, cam.fy, cam.cy, cam.height);
    Eigen::Matrix<Scalar, 2, 3> j;
    j << cam.fx * iz, 0, -cam.fx * rx.value * iz, 0, cam.fy * iz, -cam.fy * ry.value * iz;
    const Eigen::Matrix<Scalar, 2, 3> m = j * cam.rotation;
    Mat2<Scalar> cov = m * cloud.covariances[static_cast<std::size_t>(i)] * m.transpose();
    cov(0, 1) = cov(1, 0) = Scalar(0.5) * (cov(0, 1) + cov(1, 0));
    cov(0, 0) += lp;
    cov(1, 1) += lp;
    const Scalar det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
    if (!(det > 0)) continue;
    Splat2D<Scalar> s;
    s.mean = {cam.fx * t.x() * iz + cam.cx, cam.fy * t.y() * iz + cam.cy};
    s.cov = cov;
    s.conic = Vec3<Scalar>(cov(1, 1) / det, -cov(0, 1) / det, cov(0, 0) / det);
    s.view = t;
    s.depth = t.z();
    s.index = i;
    const Scalar mid = Scalar(0.5) * (cov(0, 0) + cov(1, 1));
    const Scalar lambda_max =
        mid + std::sqrt(std::max(Scalar(0), mid * mid - det));
    const Scalar three_sigma = 3 * std::sqrt(lambda_max);
    if (s.mean.x() + three_sigma < 0 || s.mean.x() - three_sigma > Scalar(cam.width - 1) ||
        s.mean.y() + three_sigma < 0 || s.mean.y() - three_sigma > Scalar(cam.height - 1)) {
      continue;
    }
    // alpha >= min_alpha requires mahalanobis^2 <= 2 ln(opacity / min_alpha)
    const Scalar budget = std::log(cloud.opacities[i]) - log_min_alpha;
    s.radius = budget > 0 ? std::sqrt(2 * budget * lambda_max) * Scalar(1.0001) + Scalar(1e-3) : Scalar(0);
    out.push_back(s);
  }
  return out;
}

template <typename Scalar> std::vector<Splat2D<Scalar>> sort_by_depth(std::vector<Splat2D<Scalar>> splats) {
  std::sort(splats.begin(), splats.end(), [](const Splat2D<Scalar>& a, const Splat2D<Scalar>& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.index < b.index;
  });
  return splats;
}

template <typename Scalar>
RenderOutput<Scalar> rasterize(const std::vector<Splat2D<Scalar>>& sorted_splats,
                               const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                               const RenderSettings& settings) {
  cam.validate();
  if (settings.tile_size < 1) throw InvalidParameter("rasterize: tile size must be positive");
  auto st = std::make_shared<RasterState<Scalar>>();
  st->camera = cam;
  st->settings = settings;
  st->cloud_size = cloud.size();
  st->tiles_x = (cam.width + settings.tile_size - 1) / settings.tile_size;
  st->tiles_y = (cam.height + settings.tile_size - 1) / settings.tile_size;
  st->splats = sorted_splats;
  st->packed.resize(sorted_splats.size());
  st->world_covariances.resize(sorted_splats.size());
  const Scalar min_power_margin = Scalar(1e-6);
  for (std::size_t i = 0; i < sorted_splats.size(); ++i) {
    const auto& s = sorted_splats[i];
    auto& p = st->packed[i];
    const Scalar o = cloud.opacities[s.index];
    p.mx = s.mean.x();
    p.my = s.mean.y();
    p.a = s.conic[0];
    p.b = s.conic[1];
    p.c = s.conic[2];
    p.opacity = o;
    p.min_power = std::log(Scalar(settings.min_alpha) / o) - min_power_margin;
    for (int ch = 0; ch < 3; ++ch) p.color[ch] = cloud.colors(ch, s.index);
    st->world_covariances[i] = cloud.covariances[static_cast<std::size_t>(s.index)];
  }
  bin_tiles(*st);

  const int w = cam.width, h = cam.height;
  RenderOutput<Scalar> out;
  out.color = Image<Scalar>(w, h, 3);
  out.alpha = Image<Scalar>(w, h, 1);
  st->final_transmittance.assign(static_cast<std::size_t>(w) * h, Scalar(1));
  st->last_entry.assign(static_cast<std::size_t>(w) * h, 0);
  const Vec3<Scalar> bg = settings.background.cast<Scalar>();
  const int ts = settings.tile_size;
  const int ntiles = st->tiles_x * st->tiles_y;

#pragma omp parallel for schedule(dynamic)
  for (int tile = 0; tile < ntiles; ++tile) {
    const int tx = tile % st->tiles_x, ty = tile / st->tiles_x;
    for (int py = ty * ts; py < std::min(h, (ty + 1) * ts); ++py) {
      for (int px = tx * ts; px < std::min(w, (tx + 1) * ts); ++px) {
        Scalar acc[3] = {0, 0, 0};
        Scalar t = 1;
        std::uint32_t last = 0;
        walk_pixel(*st, static_cast<std::size_t>(tile), px, py,
                   [&](std::uint32_t k, const auto& s, Scalar alpha, Scalar trans, Scalar, Scalar, Scalar) {
                     const Scalar wgt = alpha * trans;
                     acc[0] += s.color[0] * wgt;
                     acc[1] += s.color[1] * wgt;
                     acc[2] += s.color[2] * wgt;
                     t = trans * (1 - alpha);
                     last = k + 1;
                   });
        const auto pix = static_cast<std::size_t>(py) * w + px;
        st->final_transmittance[pix] = t;
        st->last_entry[pix] = last;
        for (int ch = 0; ch < 3; ++ch) out.color(px, py, ch) = acc[ch] + t * bg[ch];
        out.alpha(px, py) = 1 - t;
      }
    }
  }
  out.state = std::move(st);
  return out;
}

template <typename Scalar>
RenderOutput<Scalar> render(const GaussianCloud<Scalar>& cloud, const Camera<Scalar>& cam,
                            const RenderSettings& settings) {
  return rasterize(sort_by_depth(project(cloud, cam, settings)), cloud, cam, settings);
}

template <typename Scalar>
CloudGrads<Scalar> rasterize_backward(const RenderOutput<Scalar>& forward, const Image<Scalar>& grad_color,
                                      const Image<Scalar>* grad_alpha) {
  if (!forward.state) throw ContractViolation("rasterize_backward: forward state missing");
  const auto& st = *forward.state;
  const auto& cam = st.camera;
  const int w = cam.width, h = cam.height;
  if (grad_color.width != w || grad_color.height != h || grad_color.channels != 3) {
    throw ShapeMismatch("rasterize_backward: color gradient shape differs from render");
  }
  if (grad_alpha && (grad_alpha->width != w || grad_alpha->height != h || grad_alpha->channels != 1)) {
    throw ShapeMismatch("rasterize_backward: alpha gradient shape differs from render");
  }

  // Per tile-entry partials: color(3), opacity, mean(2), conic(3).
  constexpr int kSlots = 9;
  std::vector<Scalar> partial(static_cast<std::size_t>(st.tile_entries.size()) * kSlots, Scalar(0));
  const Vec3<Scalar> bg = st.settings.background.template cast<Scalar>();
  const int ts = st.settings.tile_size;
  const int ntiles = st.tiles_x * st.tiles_y;

#pragma omp parallel
  {
    std::vector<Contribution<Scalar>> stack;
#pragma omp for schedule(dynamic)
    for (int tile = 0; tile < ntiles; ++tile) {
      const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
      const auto base = st.tile_offsets[static_cast<std::size_t>(tile)];
      for (int py = ty * ts; py < std::min(h, (ty + 1) * ts); ++py) {
        for (int px = tx * ts; px < std::min(w, (tx + 1) * ts); ++px) {
          const Scalar gc[3] = {grad_color(px, py, 0), grad_color(px, py, 1), grad_color(px, py, 2)};
          const Scalar ga = grad_alpha ? (*grad_alpha)(px, py) : Scalar(0);
          if (gc[0] == 0 && gc[1] == 0 && gc[2] == 0 && ga == 0) continue;
          stack.clear();
          walk_pixel(st, static_cast<std::size_t>(tile), px, py,
                     [&](std::uint32_t k, const auto&, Scalar alpha, Scalar trans, Scalar g, Scalar dx,
                         Scalar dy) { stack.push_back({k, alpha, trans, g, dx, dy}); });
          // Composite of everything behind the current splat, color and alpha.
          Scalar behind[3] = {bg[0], bg[1], bg[2]};
          Scalar behind_alpha = 0;
          for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
            const auto& s = st.packed[st.tile_entries[base + it->entry]];
            Scalar* slot = &partial[(static_cast<std::size_t>(base) + it->entry) * kSlots];
            const Scalar wgt = it->alpha * it->transmittance;
            Scalar d_alpha = 0;
            for (int ch = 0; ch < 3; ++ch) {
              slot[ch] += gc[ch] * wgt;
              d_alpha += gc[ch] * (s.color[ch] - behind[ch]);
              behind[ch] = s.color[ch] * it->alpha + (1 - it->alpha) * behind[ch];
            }
            d_alpha += ga * (1 - behind_alpha);
            behind_alpha = it->alpha + (1 - it->alpha) * behind_alpha;
            d_alpha *= it->transmittance;

            slot[3] += d_alpha * it->gauss;
            const Scalar d_power = d_alpha * s.opacity * it->gauss;
            slot[4] += d_power * (s.a * it->dx + s.b * it->dy);
            slot[5] += d_power * (s.b * it->dx + s.c * it->dy);
            slot[6] += Scalar(-0.5) * it->dx * it->dx * d_power;
            slot[7] += -it->dx * it->dy * d_power;
            slot[8] += Scalar(-0.5) * it->dy * it->dy * d_power;
          }
        }
      }
    }
  }

  // Deterministic reduction: tiles in index order.
  std::vector<Scalar> per_splat(st.splats.size() * kSlots, Scalar(0));
  for (std::size_t e = 0; e < st.tile_entries.size(); ++e) {
    const auto s = st.tile_entries[e];
    for (int k = 0; k < kSlots; ++k) per_splat[s * kSlots + k] += partial[e * kSlots + k];
  }

  CloudGrads<Scalar> out;
  out.set_zero(st.cloud_size);
  const auto nsplats = static_cast<std::ptrdiff_t>(st.splats.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < nsplats; ++si) {
    const auto& s = st.splats[static_cast<std::size_t>(si)];
    const Scalar* g = &per_splat[static_cast<std::size_t>(si) * kSlots];
    const Eigen::Index i = s.index;
    out.visible[i] = true;
    out.colors.col(i) = Vec3<Scalar>(g[0], g[1], g[2]);
    out.opacities[i] = g[3];
    const Vec2<Scalar> d_mean(g[4], g[5]);
    // pixel -> normalized device coordinates: d(px)/d(ndc) = size / 2
    out.screen_grad_norm[i] = Vec2<Scalar>(d_mean.x() * Scalar(st.camera.width) / 2,
                                           d_mean.y() * Scalar(st.camera.height) / 2)
                                  .norm();

    Mat2<Scalar> conic;
    conic << s.conic[0], s.conic[1], s.conic[1], s.conic[2];
    Mat2<Scalar> d_conic;
    d_conic << g[6], Scalar(0.5) * g[7], Scalar(0.5) * g[7], g[8];
    const Mat2<Scalar> d_cov2 = -conic * d_conic * conic;

    const Vec3<Scalar>& t = s.view;
    const Scalar iz = Scalar(1) / t.z();
    const Scalar iz2 = iz * iz;
    const auto rx = jacobian_ratio(t.x(), iz, cam.fx, cam.cx, cam.width);
    const auto ry = jacobian_ratio(t.y(), iz, cam.fy, cam.cy, cam.height);
    Eigen::Matrix<Scalar, 2, 3> j;
    j << cam.fx * iz, 0, -cam.fx * rx.value * iz, 0, cam.fy * iz, -cam.fy * ry.value * iz;
    const Eigen::Matrix<Scalar, 2, 3> m = j * cam.rotation;
    const Mat3<Scalar>& cov3 = st.world_covariances[static_cast<std::size_t>(si)];
    out.covariances[static_cast<std::size_t>(i)] = m.transpose() * d_cov2 * m;

    const Eigen::Matrix<Scalar, 2, 3> d_m = (d_cov2 + d_cov2.transpose()) * m * cov3;
    const Eigen::Matrix<Scalar, 2, 3> d_j = d_m * cam.rotation.transpose();
    Vec3<Scalar> d_view;
    // J(0,2) = -fx * rx / z with rx = x / z unless clamped (then constant)
    const Scalar dj02_dx = rx.clamped ? Scalar(0) : -cam.fx * iz2;
    const Scalar dj12_dy = ry.clamped ? Scalar(0) : -cam.fy * iz2;
    const Scalar dj02_dz = rx.clamped ? cam.fx * rx.value * iz2 : 2 * cam.fx * t.x() * iz2 * iz;
    const Scalar dj12_dz = ry.clamped ? cam.fy * ry.value * iz2 : 2 * cam.fy * t.y() * iz2 * iz;
    d_view.x() = d_j(0, 2) * dj02_dx + d_mean.x() * cam.fx * iz;
    d_view.y() = d_j(1, 2) * dj12_dy + d_mean.y() * cam.fy * iz;
    d_view.z() = d_j(0, 0) * (-cam.fx * iz2) + d_j(0, 2) * dj02_dz + d_j(1, 1) * (-cam.fy * iz2) +
                 d_j(1, 2) * dj12_dz - d_mean.x() * cam.fx * t.x() * iz2 -
                 d_mean.y() * cam.fy * t.y() * iz2;
    out.centers.col(i) = cam.rotation.transpose() * d_view;
  }
  return out;
}

template <typename Scalar> std::uint64_t contribution_signature(const RasterState<Scalar>& st) {
  std::uint64_t hash = 1469598103934665603ull;
  const auto mix = [&](std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
  };
  const int ts = st.settings.tile_size;
  for (int tile = 0; tile < st.tiles_x * st.tiles_y; ++tile) {
    const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
    const auto base = st.tile_offsets[static_cast<std::size_t>(tile)];
    for (int py = ty * ts; py < std::min(st.camera.height, (ty + 1) * ts); ++py) {
      for (int px = tx * ts; px < std::min(st.camera.width, (tx + 1) * ts); ++px) {
        mix(static_cast<std::uint64_t>(py) * 65536u + px);
        walk_pixel(st, static_cast<std::size_t>(tile), px, py,
                   [&](std::uint32_t k, const auto&, Scalar, Scalar, Scalar, Scalar, Scalar) {
                     mix(st.splats[st.tile_entries[base + k]].index);
                   });
      }
    }
  }
  return hash;
}

#define GLIMPSE_INSTANTIATE(S)                                                                     \
  template std::vector<Splat2D<S>> project(const GaussianCloud<S>&, const Camera<S>&,              \
                                           const RenderSettings&);                                 \
  template std::vector<Splat2D<S>> sort_by_depth(std::vector<Splat2D<S>>);                         \
  template RenderOutput<S> rasterize(const std::vector<Splat2D<S>>&, const GaussianCloud<S>&,      \
                                     const Camera<S>&, const RenderSettings&);                     \
  template RenderOutput<S> render(const GaussianCloud<S>&, const Camera<S>&, const RenderSettings&); \
  template CloudGrads<S> rasterize_backward(const RenderOutput<S>&, const Image<S>&, const Image<S>*); \
  template std::uint64_t contribution_signature(const RasterState<S>&);

GLIMPSE_INSTANTIATE(float)
GLIMPSE_INSTANTIATE(double)

#undef GLIMPSE_INSTANTIATE

}  // namespace glimpse
