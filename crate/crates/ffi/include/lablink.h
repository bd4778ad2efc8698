#ifndef LABLINK_H
#define LABLINK_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LablinkStatus {
  LABLINK_STATUS_OK = 0,
  LABLINK_STATUS_NULL_ARGUMENT = 1,
  LABLINK_STATUS_INVALID_UTF8 = 2,
  LABLINK_STATUS_INVALID_ARGUMENT = 3,
  LABLINK_STATUS_CONFIG_ERROR = 4,
  LABLINK_STATUS_TOO_FEW_POINTS = 5,
  LABLINK_STATUS_EMPTY_SERIES = 6,
  LABLINK_STATUS_IO = 7,
  LABLINK_STATUS_INTERNAL = 8,
} LablinkStatus;

/**
 * Opaque platform handle.
 */
typedef struct LablinkPlatform LablinkPlatform;

typedef struct LablinkLossEstimate {
  uint64_t expected;
  uint64_t received;
  double loss_rate;
} LablinkLossEstimate;

typedef struct LablinkNyquist {
  bool adequate;
  double required_interval_s;
  double median_interval_s;
} LablinkNyquist;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens a platform from TOML configuration text. A null or empty config
 * yields an in-memory platform with defaults.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
enum LablinkStatus lablink_platform_open(const char *config_toml, struct LablinkPlatform **out);

/**
 * # Safety
 * `platform` is null or a handle from [`lablink_platform_open`] not yet freed.
 */
void lablink_platform_free(struct LablinkPlatform *platform);

/**
 * Dispatches one API request, e.g. `("POST", "/api/v1/auth/token", NULL,
 * "{...}")`. On success `*out_status` holds the HTTP status and `*out_body`
 * the response body, which the caller frees with [`lablink_string_free`].
 *
 * # Safety
 * `platform` is a live handle; `method` and `path` are NUL-terminated;
 * `token` and `body` are null or NUL-terminated; outputs are writable.
 */
enum LablinkStatus lablink_request(const struct LablinkPlatform *platform,
                                   const char *method,
                                   const char *path,
                                   const char *token,
                                   const char *body,
                                   uint16_t *out_status,
                                   char **out_body);

/**
 * Loss estimate from a wrapping transmission counter.
 *
 * # Safety
 * `counters` points to `len` readable values; `out` is writable.
 */
enum LablinkStatus lablink_partial_loss(const int64_t *counters,
                                        size_t len,
                                        int64_t modulus,
                                        struct LablinkLossEstimate *out);

/**
 * Whether sample times (epoch seconds) resolve a behavior of the given period.
 *
 * # Safety
 * `times_s` points to `len` readable values; `out` is writable.
 */
enum LablinkStatus lablink_nyquist_check(const double *times_s,
                                         size_t len,
                                         double behavior_period_s,
                                         struct LablinkNyquist *out);

/**
 * Survey anonymous id. `salt_hex` is 32 hex characters and `open_time` is
 * RFC 3339.
 *
 * # Safety
 * String arguments are NUL-terminated; `out` is writable.
 */
enum LablinkStatus lablink_anonymous_id(const char *salt_hex,
                                        const char *username,
                                        const char *provider_url,
                                        const char *open_time,
                                        char **out);

/**
 * Message of the last failure on this thread, or null. Owned by the
 * library and valid until the next call on this thread.
 */
const char *lablink_last_error_message(void);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void lablink_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LABLINK_H */
