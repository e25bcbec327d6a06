#ifndef CHARBETA_H
#define CHARBETA_H

/* Generated by cbindgen from charbeta-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum CbStatus {
  CB_STATUS_OK = 0,
  CB_STATUS_CONFIG_ERROR = 2,
  CB_STATUS_DATA_ERROR = 3,
  CB_STATUS_NULL_POINTER = 4,
  CB_STATUS_PANIC = 5,
} CbStatus;

/**
 * Interval method selector for [`cb_spot_ci`].
 */
typedef enum CbCiMethod {
  CB_CI_METHOD_CS_BOOTSTRAP = 0,
  CB_CI_METHOD_BLOCK_BOOTSTRAP = 1,
  CB_CI_METHOD_INTEGRATED = 2,
  CB_CI_METHOD_PLUGIN_NAIVE = 3,
  CB_CI_METHOD_PLUGIN_FULL = 4,
} CbCiMethod;

/**
 * Latent-mode bias correction selector.
 */
typedef enum CbBiasCorrection {
  CB_BIAS_CORRECTION_NONE = 0,
  CB_BIAS_CORRECTION_CASE1 = 1,
  CB_BIAS_CORRECTION_CASE2 = 2,
} CbBiasCorrection;

/**
 * An increment panel plus its per-interval characteristics and optional
 * factor increments.
 */
typedef struct CbPanel CbPanel;

/**
 * A confidence interval, plain-old-data.
 */
typedef struct CbInterval {
  double lo;
  double hi;
  double point;
  double q_tau;
  double level;
  /**
   * Redraws caused by rank-deficient resampled bases.
   */
  uintptr_t retries;
} CbInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or NULL when the last call succeeded.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *cb_last_error_message(void);

/**
 * Free a string returned by this library.
 *
 * # Safety
 * `s` must come from a charbeta function that documents string ownership
 * transfer, and must not be used afterwards.
 */
void cb_string_free(char *s);

/**
 * Library version string (static storage).
 */
const char *cb_version(void);

/**
 * Load a CSV panel (long format: interval_index, asset_id, dY,
 * x_1..x_{k_x}[, f_1..f_{k_factors}]).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum CbStatus cb_panel_load_csv(const char *path,
                                uintptr_t k_x,
                                uintptr_t k_factors,
                                double delta_n,
                                bool drop_incomplete,
                                struct CbPanel **out);

/**
 * Build a panel from dense buffers: `dy` is `p × n` row-major, `x` is
 * `n` blocks of `p × k_x` row-major matrices (interval-major), `f` is
 * `k_factors × n` row-major or NULL when factors are absent.
 *
 * # Safety
 * Buffers must hold the advertised number of doubles and `out` must be a
 * valid pointer.
 */
enum CbStatus cb_panel_from_arrays(const double *dy,
                                   const double *x,
                                   const double *f,
                                   uintptr_t p,
                                   uintptr_t n,
                                   uintptr_t k_x,
                                   uintptr_t k_factors,
                                   double delta_n,
                                   struct CbPanel **out);

/**
 * Simulate a panel from a JSON `DgpConfig` (see the CLI's
 * `example-config dgp` for the schema).
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string, `out` a valid
 * pointer.
 */
enum CbStatus cb_panel_simulate_json(const char *config_json, struct CbPanel **out);

/**
 * Destroy a panel handle.
 *
 * # Safety
 * `panel` must come from this library and not be used afterwards.
 */
void cb_panel_free(struct CbPanel *panel);

/**
 * Asset count of a panel (0 on null).
 *
 * # Safety
 * `panel` must be a live handle from this library.
 */
uintptr_t cb_panel_p(const struct CbPanel *panel);

/**
 * Interval count of a panel (0 on null).
 *
 * # Safety
 * `panel` must be a live handle from this library.
 */
uintptr_t cb_panel_n(const struct CbPanel *panel);

/**
 * Spot estimation on one window. `beta`, `g`, `gamma` are caller-owned
 * `p × k_out` row-major buffers; `k_out` is the factor-column count in
 * known-factor mode (`latent_k = 0`) or `latent_k` otherwise.
 *
 * # Safety
 * Output buffers must hold `p * k_out` doubles; `panel` must be live.
 */
enum CbStatus cb_estimate_spot(const struct CbPanel *panel,
                               uintptr_t window_start,
                               uintptr_t k_n,
                               uintptr_t latent_k,
                               const char *sieve_json,
                               double *beta,
                               double *g,
                               double *gamma);

/**
 * Confidence interval for `v' g` of one asset on one window.
 *
 * `latent_k = 0` uses the panel's factor columns; otherwise latent factors
 * are estimated by projected PCA and `bias` selects the correction. `v` has
 * length `k_factors` (known mode) or `latent_k`. `block_size` is only read
 * by the block bootstrap; `k_n`/`window_start` position the window
 * (`Integrated` sweeps all overlapping windows of length `k_n`).
 *
 * # Safety
 * `panel` must be live, `v` must hold the advertised length, `out` must be
 * a valid pointer.
 */
enum CbStatus cb_spot_ci(const struct CbPanel *panel,
                         enum CbCiMethod method,
                         uintptr_t window_start,
                         uintptr_t k_n,
                         uintptr_t target_l,
                         const double *v,
                         uintptr_t v_len,
                         double level,
                         uintptr_t b,
                         uint64_t seed,
                         uintptr_t latent_k,
                         enum CbBiasCorrection bias,
                         uintptr_t block_size,
                         const char *sieve_json,
                         struct CbInterval *out);

/**
 * Run a coverage study from a JSON `ExperimentConfig`; on success `*out`
 * receives a newly allocated JSON-lines report (free with
 * [`cb_string_free`]).
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out` must be a valid pointer.
 */
enum CbStatus cb_coverage_study_json(const char *config_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHARBETA_H */
