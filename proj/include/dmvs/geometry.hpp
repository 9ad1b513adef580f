#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "dmvs/tensor.hpp"

namespace dmvs {

template <typename T>
struct Vec2 {
  T x = 0, y = 0;
};

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;
};

template <typename T>
struct Mat3 {
  // Row-major.
  std::array<T, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }
  T& operator()(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }
  T operator()(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }

  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& b) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * b(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  T det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
  Mat3 inverse() const {
    T d = det();
    if (std::abs(static_cast<double>(d)) < 1e-30)
      throw std::runtime_error("Mat3::inverse: singular matrix");
    T id = T(1) / d;
    Mat3 r;
    r.m = {(m[4] * m[8] - m[5] * m[7]) * id, (m[2] * m[7] - m[1] * m[8]) * id,
           (m[1] * m[5] - m[2] * m[4]) * id, (m[5] * m[6] - m[3] * m[8]) * id,
           (m[0] * m[8] - m[2] * m[6]) * id, (m[2] * m[3] - m[0] * m[5]) * id,
           (m[3] * m[7] - m[4] * m[6]) * id, (m[1] * m[6] - m[0] * m[7]) * id,
           (m[0] * m[4] - m[1] * m[3]) * id};
    return r;
  }
};

template <typename T>
inline Vec3<T> operator+(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.x + b.x, a.y + b.y, a.z + b.z};
}
template <typename T>
inline Vec3<T> operator-(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.x - b.x, a.y - b.y, a.z - b.z};
}
template <typename T>
inline Vec3<T> operator*(const Vec3<T>& a, T s) {
  return {a.x * s, a.y * s, a.z * s};
}
template <typename T>
inline T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
template <typename T>
inline Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
template <typename T>
inline T norm(const Vec3<T>& a) {
  return std::sqrt(dot(a, a));
}
template <typename T>
inline Vec3<T> normalized(const Vec3<T>& a) {
  T n = norm(a);
  return {a.x / n, a.y / n, a.z / n};
}

// Pinhole camera. Extrinsics map world points to camera coordinates,
// X_cam = R * X_world + t. Pixel centers sit at integer coordinates and the
// homogeneous pixel is (u, v, 1).
template <typename T>
struct Camera {
  Mat3<T> intrinsics = Mat3<T>::identity();
  Mat3<T> rotation = Mat3<T>::identity();
  Vec3<T> translation{};
  T d_min = T(1);
  T d_max = T(2);

  void validate(double tol = 1e-6) const {
    Mat3<T> rrt = rotation * rotation.transposed();
    Mat3<T> eye = Mat3<T>::identity();
    for (int i = 0; i < 9; ++i)
      if (std::abs(static_cast<double>(rrt.m[i] - eye.m[i])) > tol)
        throw std::invalid_argument("Camera: rotation is not orthonormal");
    if (std::abs(static_cast<double>(rotation.det()) - 1.0) > tol)
      throw std::invalid_argument("Camera: rotation determinant is not +1");
    if (!(intrinsics(0, 0) > 0 && intrinsics(1, 1) > 0))
      throw std::invalid_argument("Camera: non-positive focal length");
    if (intrinsics(1, 0) != T(0) || intrinsics(2, 0) != T(0) || intrinsics(2, 1) != T(0))
      throw std::invalid_argument("Camera: intrinsics lower triangle must be zero");
    if (!(T(0) < d_min && d_min < d_max))
      throw std::invalid_argument("Camera: invalid depth range");
  }

  // Camera with intrinsics rescaled to a grid downsampled by `factor`.
  // Pixel-center convention: x_coarse = (x_fine + 0.5) / factor - 0.5.
  Camera scaled(T factor) const {
    Camera c = *this;
    T inv = T(1) / factor;
    c.intrinsics(0, 0) *= inv;
    c.intrinsics(0, 1) *= inv;
    c.intrinsics(1, 1) *= inv;
    c.intrinsics(0, 2) = (intrinsics(0, 2) + T(0.5)) * inv - T(0.5);
    c.intrinsics(1, 2) = (intrinsics(1, 2) + T(0.5)) * inv - T(0.5);
    return c;
  }

  template <typename U>
  Camera<U> cast() const {
    Camera<U> c;
    for (int i = 0; i < 9; ++i) {
      c.intrinsics.m[i] = static_cast<U>(intrinsics.m[i]);
      c.rotation.m[i] = static_cast<U>(rotation.m[i]);
    }
    c.translation = {static_cast<U>(translation.x), static_cast<U>(translation.y),
                     static_cast<U>(translation.z)};
    c.d_min = static_cast<U>(d_min);
    c.d_max = static_cast<U>(d_max);
    return c;
  }
};

// Per-pixel depth in world units with a validity mask. `stage` is the
// resolution stage index m, where the stage grid is (H/2^(4-m), W/2^(4-m))
// of the full image; stage 4 denotes full resolution.
template <typename T>
struct DepthMap {
  Tensor<T> values;       // [H,W]
  Tensor<uint8_t> valid;  // [H,W]
  int stage = 4;

  DepthMap() = default;
  DepthMap(int64_t h, int64_t w, int stage_idx = 4)
      : values({h, w}), valid({h, w}, uint8_t(1)), stage(stage_idx) {}
  int64_t height() const { return values.dim(0); }
  int64_t width() const { return values.dim(1); }
};

template <typename T>
struct PixelProjection {
  Vec2<T> pixel{};
  T depth = 0;  // depth in the target camera (z component)
  bool in_bounds = false;
};

template <typename T>
inline Vec3<T> project_homogeneous(const Camera<T>& cam, const Vec3<T>& world) {
  return cam.intrinsics * (cam.rotation * world + cam.translation);
}

// World point -> pixel + depth in `cam`.
template <typename T>
inline PixelProjection<T> project(const Camera<T>& cam, const Vec3<T>& world, int64_t width,
                                  int64_t height) {
  Vec3<T> h = project_homogeneous(cam, world);
  PixelProjection<T> out;
  out.depth = h.z;
  if (std::abs(static_cast<double>(h.z)) < 1e-12) return out;  // degenerate, flagged invalid
  out.pixel = {h.x / h.z, h.y / h.z};
  out.in_bounds = h.z > T(0) && out.pixel.x >= T(0) && out.pixel.x <= T(width - 1) &&
                  out.pixel.y >= T(0) && out.pixel.y <= T(height - 1);
  return out;
}

// Pixel at `depth` in `cam` -> world point. Inverse of project().
template <typename T>
inline Vec3<T> backproject(const Camera<T>& cam, const Vec2<T>& pixel, T depth) {
  Vec3<T> ray = cam.intrinsics.inverse() * Vec3<T>{pixel.x, pixel.y, T(1)};
  Vec3<T> cam_pt = ray * depth;
  return cam.rotation.transposed() * (cam_pt - cam.translation);
}

// Reference pixel at a depth hypothesis -> source-view pixel. The in_bounds
// flag is false when the point projects behind the source camera, the
// projection degenerates, or the pixel falls outside [0,W-1]x[0,H-1].
template <typename T>
inline PixelProjection<T> warp_pixel(const Camera<T>& ref_cam, const Camera<T>& src_cam,
                                     const Vec2<T>& pixel, T depth, int64_t src_width,
                                     int64_t src_height) {
  Vec3<T> world = backproject(ref_cam, pixel, depth);
  return project(src_cam, world, src_width, src_height);
}

template <typename T>
struct BilinearSample {
  T value = 0;
  bool valid = false;
};

// Bilinear lookup on a [H,W] grid. Coordinates outside [0,W-1]x[0,H-1]
// yield value 0 and valid=false.
template <typename T>
inline BilinearSample<T> bilinear_sample(const Tensor<T>& grid, T x, T y) {
  const int64_t h = grid.dim(0), w = grid.dim(1);
  BilinearSample<T> out;
  if (!(x >= T(0) && x <= T(w - 1) && y >= T(0) && y <= T(h - 1))) return out;
  int64_t x0 = static_cast<int64_t>(std::floor(static_cast<double>(x)));
  int64_t y0 = static_cast<int64_t>(std::floor(static_cast<double>(y)));
  int64_t x1 = std::min(x0 + 1, w - 1);
  int64_t y1 = std::min(y0 + 1, h - 1);
  T dx = x - T(x0), dy = y - T(y0);
  T v00 = grid.at(y0, x0), v01 = grid.at(y0, x1);
  T v10 = grid.at(y1, x0), v11 = grid.at(y1, x1);
  out.value = (T(1) - dy) * ((T(1) - dx) * v00 + dx * v01) + dy * ((T(1) - dx) * v10 + dx * v11);
  out.valid = true;
  return out;
}

// Multi-channel variant over a [C,H,W] feature map; writes C values to `out`.
// Returns false (and zeros) for out-of-range coordinates.
template <typename T>
inline bool bilinear_sample_chw(const Tensor<T>& feat, T x, T y, T* out) {
  const int64_t c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  if (!(x >= T(0) && x <= T(w - 1) && y >= T(0) && y <= T(h - 1))) {
    for (int64_t i = 0; i < c; ++i) out[i] = T(0);
    return false;
  }
  int64_t x0 = static_cast<int64_t>(std::floor(static_cast<double>(x)));
  int64_t y0 = static_cast<int64_t>(std::floor(static_cast<double>(y)));
  int64_t x1 = std::min(x0 + 1, w - 1);
  int64_t y1 = std::min(y0 + 1, h - 1);
  T dx = x - T(x0), dy = y - T(y0);
  T w00 = (T(1) - dy) * (T(1) - dx), w01 = (T(1) - dy) * dx;
  T w10 = dy * (T(1) - dx), w11 = dy * dx;
  const T* base = feat.data();
  const int64_t plane = h * w;
  for (int64_t i = 0; i < c; ++i) {
    const T* p = base + i * plane;
    out[i] = w00 * p[y0 * w + x0] + w01 * p[y0 * w + x1] + w10 * p[y1 * w + x0] +
             w11 * p[y1 * w + x1];
  }
  return true;
}

// Normalized inverse depth: depth d in [d_min,d_max] -> (1/d - 1/d_max) /
// (1/d_min - 1/d_max) in [0,1]. d_min maps to 1, d_max maps to 0.
template <typename T>
inline T normalize_inverse_value(T depth, T d_min, T d_max) {
  if (!(depth > T(0))) throw std::invalid_argument("normalize_inverse: non-positive depth");
  return (T(1) / depth - T(1) / d_max) / (T(1) / d_min - T(1) / d_max);
}

template <typename T>
inline T denormalize_inverse_value(T nd, T d_min, T d_max) {
  T inv = nd * (T(1) / d_min - T(1) / d_max) + T(1) / d_max;
  return T(1) / inv;
}

template <typename T>
inline Tensor<T> normalize_inverse(const DepthMap<T>& depth, T d_min, T d_max) {
  Tensor<T> out(depth.values.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    if (depth.valid[i])
      out[i] = normalize_inverse_value(depth.values[i], d_min, d_max);
    else
      out[i] = T(0);
  }
  return out;
}

template <typename T>
inline DepthMap<T> denormalize_inverse(const Tensor<T>& grid, T d_min, T d_max, int stage = 4) {
  DepthMap<T> out(grid.dim(0), grid.dim(1), stage);
  for (int64_t i = 0; i < grid.numel(); ++i)
    out.values[i] = denormalize_inverse_value(grid[i], d_min, d_max);
  return out;
}

}  // namespace dmvs
