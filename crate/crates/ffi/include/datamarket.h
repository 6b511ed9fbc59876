#ifndef DATAMARKET_H
#define DATAMARKET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DmStatus {
  DM_STATUS_OK = 0,
  DM_STATUS_NULL_POINTER = 1,
  DM_STATUS_INVALID_UTF8 = 2,
  DM_STATUS_INVALID_CONFIG = 3,
  DM_STATUS_UNKNOWN_ATTACK = 4,
  DM_STATUS_INVALID_INPUT = 5,
  DM_STATUS_OVERFLOW = 6,
  /**
   * The run stopped because a protocol invariant failed.
   */
  DM_STATUS_INVARIANT_VIOLATION = 7,
  DM_STATUS_SETUP_FAILURE = 8,
  /**
   * `dm_simulation_run` was called twice on one handle.
   */
  DM_STATUS_ALREADY_RUN = 9,
  DM_STATUS_PANIC = 99,
} DmStatus;

/**
 * Opaque simulation handle.
 */
typedef struct DmSimulation DmSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a simulation from a JSON scenario. `config_json` may be `"{}"`
 * for all defaults.
 *
 * # Safety
 * `config_json` must be a valid C string and `out` a writable pointer.
 */
enum DmStatus dm_simulation_new(const char *config_json, struct DmSimulation **out);

/**
 * Runs to quiescence or `max_epochs`; writes the epoch count to
 * `out_epochs` if it is not null. The handle stays usable for the
 * artifact getters even after an invariant failure.
 *
 * # Safety
 * `sim` must come from `dm_simulation_new` and not be freed.
 */
enum DmStatus dm_simulation_run(struct DmSimulation *sim, uint64_t *out_epochs);

/**
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum DmStatus dm_simulation_settled_count(const struct DmSimulation *sim, uint64_t *out);

/**
 * Event log as JSON lines.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum DmStatus dm_simulation_trace_jsonl(const struct DmSimulation *sim, char **out);

/**
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum DmStatus dm_simulation_cost_report_json(const struct DmSimulation *sim, char **out);

/**
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum DmStatus dm_simulation_reputation_json(const struct DmSimulation *sim, char **out);

/**
 * # Safety
 * `sim` must be null or a handle not yet freed.
 */
void dm_simulation_free(struct DmSimulation *sim);

/**
 * Monte Carlo linkage attack (`"timing"` or `"size"`) over `runs` seeds.
 *
 * # Safety
 * Both strings must be valid C strings and `out` writable.
 */
enum DmStatus dm_attack_report_json(const char *config_json,
                                    const char *attack,
                                    uint32_t runs,
                                    char **out);

/**
 * `basic_price * volume`, rejecting zero inputs and overflow.
 *
 * # Safety
 * `out` must be writable.
 */
enum DmStatus dm_compute_price(uint64_t basic_price, uint64_t volume, uint64_t *out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void dm_string_free(char *s);

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *dm_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DATAMARKET_H */
