#ifndef CALRANK_H
#define CALRANK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum CalrankStatus {
  CALRANK_STATUS_OK = 0,
  CALRANK_STATUS_NULL_POINTER = 1,
  CALRANK_STATUS_CONFIG = 2,
  CALRANK_STATUS_SHAPE = 3,
  CALRANK_STATUS_NUMERIC = 4,
  CALRANK_STATUS_DOMAIN = 5,
  CALRANK_STATUS_LOOKUP = 6,
  CALRANK_STATUS_DATA = 7,
  CALRANK_STATUS_FIT = 8,
  CALRANK_STATUS_UNDEFINED_METRIC = 9,
  CALRANK_STATUS_FORMAT = 10,
  CALRANK_STATUS_IO = 11,
  CALRANK_STATUS_UTF8 = 12,
  CALRANK_STATUS_PANIC = 13,
} CalrankStatus;

/**
 * A piecewise-linear calibrator built from raw heights.
 */
typedef struct CalrankKnots CalrankKnots;

/**
 * A generated or loaded synthetic world.
 */
typedef struct CalrankWorld CalrankWorld;

/**
 * Optimal score gaps of the two-item pairwise problem.
 */
typedef struct CalrankPairOptimum {
  double pointwise_gap;
  double pair_gap;
  double pair_probability;
  double expected_loss;
  bool distinct;
} CalrankPairOptimum;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *calrank_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *calrank_version(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void calrank_string_free(char *s);

/**
 * Generates the world of an experiment spec (JSON; null for defaults) with
 * the given seed.
 *
 * # Safety
 * `spec_json` is null or a NUL-terminated string; `out_world` is writable.
 */
enum CalrankStatus calrank_world_generate(const char *spec_json,
                                          uint64_t seed,
                                          struct CalrankWorld **out_world);

/**
 * Loads a world written by `calrank generate`.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out_world` is writable.
 */
enum CalrankStatus calrank_world_load(const char *dir, struct CalrankWorld **out_world);

/**
 * Writes the world to a directory.
 *
 * # Safety
 * `world` is a live handle; `dir` is a NUL-terminated path.
 */
enum CalrankStatus calrank_world_save(const struct CalrankWorld *world, const char *dir);

/**
 * Ground-truth click probability of a (user, item) pair.
 *
 * # Safety
 * `world` is a live handle; `out_ctr` is writable.
 */
enum CalrankStatus calrank_world_true_ctr(const struct CalrankWorld *world,
                                          size_t user_id,
                                          size_t item_id,
                                          double *out_ctr);

/**
 * Number of users and items of the world.
 *
 * # Safety
 * `world` is a live handle; the out-pointers are writable.
 */
enum CalrankStatus calrank_world_size(const struct CalrankWorld *world,
                                      size_t *out_users,
                                      size_t *out_items);

/**
 * Releases a world. Null is ignored.
 *
 * # Safety
 * `world` comes from this library and is not used afterwards.
 */
void calrank_world_free(struct CalrankWorld *world);

/**
 * Builds a calibrator from 100 raw heights.
 *
 * # Safety
 * `raw` points to `len` doubles; `out_knots` is writable.
 */
enum CalrankStatus calrank_knots_from_raw(const double *raw,
                                          size_t len,
                                          struct CalrankKnots **out_knots);

/**
 * Calibrates one prediction in `[0, 1]`.
 *
 * # Safety
 * `knots` is a live handle; `out_value` is writable.
 */
enum CalrankStatus calrank_knots_calibrate(const struct CalrankKnots *knots,
                                           double prediction,
                                           double *out_value);

/**
 * Releases a calibrator. Null is ignored.
 *
 * # Safety
 * `knots` comes from this library and is not used afterwards.
 */
void calrank_knots_free(struct CalrankKnots *knots);

/**
 * AUC of one query; `UndefinedMetric` when a class is missing.
 *
 * # Safety
 * `scores` and `labels` point to `n` elements; `out_value` is writable.
 */
enum CalrankStatus calrank_auc(const double *scores,
                               const uint8_t *labels,
                               size_t n,
                               double *out_value);

/**
 * GAUC over groups stored back to back; `offsets` holds `num_groups + 1`
 * increasing boundaries into `scores`/`labels`.
 *
 * # Safety
 * `offsets` has `num_groups + 1` entries and the arrays cover
 * `offsets[num_groups]` elements; the out-pointers are writable
 * (`out_skipped` may be null).
 */
enum CalrankStatus calrank_gauc(const double *scores,
                                const uint8_t *labels,
                                const size_t *offsets,
                                size_t num_groups,
                                double *out_value,
                                size_t *out_skipped);

/**
 * Binary-gain NDCG@k; `UndefinedMetric` without positives.
 *
 * # Safety
 * `scores` and `labels` point to `n` elements; `out_value` is writable.
 */
enum CalrankStatus calrank_ndcg_at_k(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     size_t k,
                                     double *out_value);

/**
 * Mean binary cross-entropy of probabilities.
 *
 * # Safety
 * `predictions` and `labels` point to `n` elements; `out_value` is writable.
 */
enum CalrankStatus calrank_logloss(const double *predictions,
                                   const uint8_t *labels,
                                   size_t n,
                                   double *out_value);

/**
 * Expected calibration error over 100 equal-width bins.
 *
 * # Safety
 * As [`calrank_logloss`].
 */
enum CalrankStatus calrank_ece(const double *predictions,
                               const uint8_t *labels,
                               size_t n,
                               double *out_value);

/**
 * Sum of predictions over sum of labels.
 *
 * # Safety
 * As [`calrank_logloss`].
 */
enum CalrankStatus calrank_pcoc(const double *predictions,
                                const uint8_t *labels,
                                size_t n,
                                double *out_value);

/**
 * Pointwise cross-entropy of one logit and its gradient.
 *
 * # Safety
 * `out_value` is writable; `out_grad` is null or writable.
 */
enum CalrankStatus calrank_pointwise_loss(double logit,
                                          uint8_t label,
                                          double *out_value,
                                          double *out_grad);

/**
 * Group pairwise loss; `out_grad` receives `n` logit gradients.
 *
 * # Safety
 * `logits` and `labels` point to `n` elements; `out_value` is writable;
 * `out_grad` is null or has room for `n` doubles.
 */
enum CalrankStatus calrank_pairwise_loss(const double *logits,
                                         const uint8_t *labels,
                                         size_t n,
                                         double *out_value,
                                         double *out_grad);

/**
 * Group listwise softmax loss; gradients as [`calrank_pairwise_loss`].
 *
 * # Safety
 * As [`calrank_pairwise_loss`].
 */
enum CalrankStatus calrank_listnet_loss(const double *logits,
                                        const uint8_t *labels,
                                        size_t n,
                                        double *out_value,
                                        double *out_grad);

/**
 * `alpha` times mean pointwise plus `1 - alpha` times pairwise loss.
 *
 * # Safety
 * As [`calrank_pairwise_loss`].
 */
enum CalrankStatus calrank_multi_objective_loss(const double *logits,
                                                const uint8_t *labels,
                                                size_t n,
                                                double alpha,
                                                double *out_value,
                                                double *out_grad);

/**
 * Per-sample pairwise loss against a dumped context of `m` logged scores.
 *
 * # Safety
 * The dumped arrays point to `m` elements; `out_value` is writable;
 * `out_grad` is null or writable.
 */
enum CalrankStatus calrank_self_boost_loss(double logit,
                                           uint8_t label,
                                           const double *dumped_scores,
                                           const uint8_t *dumped_labels,
                                           size_t m,
                                           double *out_value,
                                           double *out_grad);

/**
 * `alpha` times pointwise plus `1 - alpha` times the self-boosted pairwise
 * loss. `m = 0` passes no dumped context, which is a `Data` error.
 *
 * # Safety
 * As [`calrank_self_boost_loss`].
 */
enum CalrankStatus calrank_multi_boost_loss(double logit,
                                            uint8_t label,
                                            const double *dumped_scores,
                                            const uint8_t *dumped_labels,
                                            size_t m,
                                            double alpha,
                                            double *out_value,
                                            double *out_grad);

/**
 * Fits Platt scaling `σ(scale · logit + offset)`.
 *
 * # Safety
 * `logits` and `labels` point to `n` elements; the out-pointers are writable.
 */
enum CalrankStatus calrank_platt_fit(const double *logits,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out_scale,
                                     double *out_offset);

/**
 * `σ(scale · logit + offset)`.
 */
double calrank_platt_apply(double scale, double offset, double logit);

/**
 * Optimal pairwise and pointwise score gaps for two Bernoulli items.
 *
 * # Safety
 * `out_result` is writable.
 */
enum CalrankStatus calrank_pair_optimum(double p1,
                                        double p2,
                                        bool include_ties,
                                        struct CalrankPairOptimum *out_result);

/**
 * Runs an experiment command (`compare`, `shuffle-ablation`, `alpha-sweep`
 * or `calibration-ablation`) on a spec (JSON; null for defaults) and
 * returns its summary JSON, to be released with [`calrank_string_free`].
 *
 * # Safety
 * `command` is a NUL-terminated string; `spec_json` is null or one;
 * `out_json` is writable.
 */
enum CalrankStatus calrank_run_command(const char *command, const char *spec_json, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALRANK_H */
