#ifndef EPIREFINE_H
#define EPIREFINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum EpiStatus {
  EPI_STATUS_OK = 0,
  EPI_STATUS_NULL_ARGUMENT = 1,
  EPI_STATUS_INVALID_ARGUMENT = 2,
  EPI_STATUS_IO = 3,
  /**
   * Too few correspondences, or no pose could be estimated.
   */
  EPI_STATUS_MATCHING = 4,
  /**
   * Geometry without a baseline, or otherwise degenerate.
   */
  EPI_STATUS_DEGENERATE = 5,
  EPI_STATUS_RUNTIME = 6,
  EPI_STATUS_PANIC = 7,
} EpiStatus;

/**
 * Filtering policy for matches during refinement.
 */
typedef enum EpiPolicy {
  EPI_POLICY_NO_FILTERING = 0,
  EPI_POLICY_FIXED_AT_INIT = 1,
  EPI_POLICY_ADAPTIVE = 2,
} EpiPolicy;

/**
 * Opaque RGB image with values in [0, 1].
 */
typedef struct EpiImage EpiImage;

/**
 * Opaque synthetic scene.
 */
typedef struct EpiScene EpiScene;

/**
 * Pinhole camera: world-to-camera rotation (row-major) and translation,
 * plus intrinsics and image size.
 */
typedef struct EpiCamera {
  double rotation[9];
  double translation[3];
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} EpiCamera;

/**
 * Evaluation scalars; fields that could not be computed are NaN.
 */
typedef struct EpiReport {
  double r_dist_deg;
  double t_dist_deg;
  double epi_mean_px;
  double epi_median_px;
  double masked_psnr_db;
  double masked_ssim;
  uint32_t inliers;
} EpiReport;

typedef struct EpiRefineConfig {
  uint32_t iterations;
  double learning_rate;
  double lambda_rgb;
  double confidence_threshold;
  enum EpiPolicy policy;
} EpiRefineConfig;

/**
 * Outcome of one pose-latent refinement trial.
 */
typedef struct EpiTrialResult {
  struct EpiReport pre;
  struct EpiReport post;
  double initial_loss;
  double best_loss;
  uint32_t best_iteration;
} EpiTrialResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t epi_last_error(char *buf, size_t len);

/**
 * Generates a scene with `n` primitives at depths `[depth_min, depth_max]`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum EpiStatus epi_scene_generate(uint64_t seed,
                                  uint32_t n,
                                  double depth_min,
                                  double depth_max,
                                  struct EpiScene **out);

/**
 * Loads a scene JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum EpiStatus epi_scene_load(const char *path, struct EpiScene **out);

/**
 * Writes a scene as JSON.
 *
 * # Safety
 * `scene` must be a live handle and `path` a NUL-terminated string.
 */
enum EpiStatus epi_scene_save(const struct EpiScene *scene, const char *path);

/**
 * Number of primitives, or 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
uint32_t epi_scene_len(const struct EpiScene *scene);

/**
 * Releases a scene; null is ignored.
 *
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void epi_scene_free(struct EpiScene *scene);

/**
 * Renders `scene` from `camera`.
 *
 * # Safety
 * Pointers must be valid; `out` receives a new image handle.
 */
enum EpiStatus epi_render(const struct EpiScene *scene,
                          const struct EpiCamera *camera_in,
                          struct EpiImage **out);

/**
 * Loads an 8-bit RGB PNG.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum EpiStatus epi_image_load_png(const char *path, struct EpiImage **out);

/**
 * Writes an image as an 8-bit PNG.
 *
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum EpiStatus epi_image_save_png(const struct EpiImage *image, const char *path);

/**
 * Width, height and channel count of an image.
 *
 * # Safety
 * `image` must be a live handle; output pointers must be valid.
 */
enum EpiStatus epi_image_size(const struct EpiImage *image,
                              uint32_t *width,
                              uint32_t *height,
                              uint32_t *channels);

/**
 * Copies row-major, channel-interleaved pixel values into `buf`, which
 * must hold `width * height * channels` doubles.
 *
 * # Safety
 * `image` must be a live handle and `buf` must point to `len` doubles.
 */
enum EpiStatus epi_image_copy(const struct EpiImage *image, double *buf, size_t len);

/**
 * Releases an image; null is ignored.
 *
 * # Safety
 * `image` must be null or a handle not yet freed.
 */
void epi_image_free(struct EpiImage *image);

/**
 * Fundamental matrix (row-major, unit Frobenius norm) mapping reference
 * pixels to epipolar lines in the target image.
 *
 * # Safety
 * Camera pointers must be valid and `out` must hold 9 doubles.
 */
enum EpiStatus epi_fundamental(const struct EpiCamera *reference,
                               const struct EpiCamera *target,
                               double *out);

/**
 * Symmetric epipolar distance `d(y, Fx) + d(x, Fᵀy)` in pixels.
 *
 * # Safety
 * `f` must hold 9 doubles, `x` and `y` 2 each, and `out` must be valid.
 */
enum EpiStatus epi_symmetric_distance(const double *f,
                                      const double *x,
                                      const double *y,
                                      double *out);

/**
 * Evaluates `generated` against `reference` for the given cameras with the
 * default evaluation settings (no warp mask, so PSNR/SSIM are NaN).
 *
 * # Safety
 * All pointers must be valid; images must match the camera sizes.
 */
enum EpiStatus epi_evaluate(const struct EpiImage *reference,
                            const struct EpiImage *generated,
                            const struct EpiCamera *reference_camera,
                            const struct EpiCamera *target_camera,
                            struct EpiReport *out);

/**
 * Default refinement settings.
 */
struct EpiRefineConfig epi_refine_config_default(void);

/**
 * Runs one pose-latent refinement trial: the target camera orbits the
 * scene pivot by the given angles, the generated view starts from a seeded
 * perturbation within `[perturb_min_deg, perturb_max_deg]`, and both the
 * initial and refined images are evaluated. `post_image` may be null; if
 * not, it receives the refined image.
 *
 * # Safety
 * Pointers must be valid (except the optional `post_image`).
 */
enum EpiStatus epi_refine_pose_trial(const struct EpiScene *scene,
                                     const struct EpiCamera *reference_camera,
                                     double azimuth_deg,
                                     double elevation_deg,
                                     double perturb_min_deg,
                                     double perturb_max_deg,
                                     uint64_t seed,
                                     const struct EpiRefineConfig *config,
                                     struct EpiTrialResult *out,
                                     struct EpiImage **post_image);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPIREFINE_H */
