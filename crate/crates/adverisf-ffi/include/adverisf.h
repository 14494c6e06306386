#ifndef ADVERISF_H
#define ADVERISF_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function. Values match the CLI
 * exit codes.
 */
typedef enum AdvStatus {
  ADV_STATUS_OK = 0,
  ADV_STATUS_ERROR = 1,
  ADV_STATUS_CONFIG_ERROR = 2,
  ADV_STATUS_DATASET_ERROR = 3,
  ADV_STATUS_DIVERGED = 4,
  ADV_STATUS_NULL_ARGUMENT = 5,
} AdvStatus;

/**
 * Opaque parsed experiment configuration.
 */
typedef struct AdvConfig AdvConfig;

/**
 * Opaque result of training one seed.
 */
typedef struct AdvRunResult AdvRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *adv_last_error(void);

/**
 * Parses a configuration file. On success writes a handle the caller must
 * release with `adv_config_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum AdvStatus adv_config_load(const char *path, struct AdvConfig **out);

/**
 * Parses configuration text. Same ownership contract as `adv_config_load`.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum AdvStatus adv_config_parse(const char *text, struct AdvConfig **out);

/**
 * Releases a configuration handle. NULL is allowed.
 *
 * # Safety
 * `config` must be a handle returned by this library, released once.
 */
void adv_config_free(struct AdvConfig *config);

/**
 * Trains the configured model for one seed. `variant` selects an ablation
 * ("A0".."A3"); NULL means A0 and is ignored for baseline models. On
 * success writes a result handle the caller must release with
 * `adv_result_free`.
 *
 * # Safety
 * `config` must be a live handle from this library; `out` must be valid;
 * `variant` must be NULL or a valid NUL-terminated string.
 */
enum AdvStatus adv_run_seed(const struct AdvConfig *config,
                            uint64_t seed,
                            const char *variant,
                            struct AdvRunResult **out);

/**
 * Training-set R-squared of a finished run.
 *
 * # Safety
 * `result` must be a live handle from `adv_run_seed`.
 */
double adv_result_train_r2(const struct AdvRunResult *result);

/**
 * Validation-set R-squared of a finished run.
 *
 * # Safety
 * `result` must be a live handle from `adv_run_seed`.
 */
double adv_result_valid_r2(const struct AdvRunResult *result);

/**
 * Test-set R-squared of a finished run.
 *
 * # Safety
 * `result` must be a live handle from `adv_run_seed`.
 */
double adv_result_test_r2(const struct AdvRunResult *result);

/**
 * Number of critic computation graphs built during the run (0 under the A3
 * ablation).
 *
 * # Safety
 * `result` must be a live handle from `adv_run_seed`.
 */
uint64_t adv_result_critic_graph_builds(const struct AdvRunResult *result);

/**
 * Serializes the run record as JSON. The returned string must be released
 * with `adv_string_free`; NULL on failure.
 *
 * # Safety
 * `result` must be a live handle from `adv_run_seed`.
 */
char *adv_result_to_json(const struct AdvRunResult *result);

/**
 * Releases a string returned by `adv_result_to_json`. NULL is allowed.
 *
 * # Safety
 * `s` must come from this library, released once.
 */
void adv_string_free(char *s);

/**
 * Releases a run-result handle. NULL is allowed.
 *
 * # Safety
 * `result` must be a handle returned by this library, released once.
 */
void adv_result_free(struct AdvRunResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVERISF_H */
