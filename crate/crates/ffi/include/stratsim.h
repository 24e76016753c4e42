#ifndef STRATSIM_H
#define STRATSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_ARGUMENT = 1,
  SS_STATUS_INVALID_UTF8 = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_INVALID_INPUT = 4,
  SS_STATUS_COMPILE_FAILED = 5,
  SS_STATUS_MISSING_COST = 6,
  SS_STATUS_SIMULATION_FAILED = 7,
  SS_STATUS_OUT_OF_RANGE = 8,
  SS_STATUS_PANIC = 9,
} SsStatus;

typedef struct SsCluster SsCluster;

typedef struct SsCosts SsCosts;

typedef struct SsModel SsModel;

typedef struct SsReport SsReport;

typedef struct SsStrategy SsStrategy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null.
//
// The pointer stays valid until the next failing call on the same thread.
const char *ss_last_error_message(void);

// Library version as a static string.
const char *ss_version(void);

// Loads a model file and derives its backward pass.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

// # Safety
// `m` must come from [`ss_model_load`] and not be used afterwards.
void ss_model_free(struct SsModel *m);

// Number of layers in a model, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live model handle.
size_t ss_model_layer_count(const struct SsModel *m);

// Loads a strategy file for `model` and propagates it.
//
// # Safety
// `model` must be a live handle, `path` a NUL-terminated string and `out` writable.
enum SsStatus ss_strategy_load(const struct SsModel *model,
                               const char *path,
                               struct SsStrategy **out);

// # Safety
// `s` must come from [`ss_strategy_load`] and not be used afterwards.
void ss_strategy_free(struct SsStrategy *s);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SsStatus ss_cluster_load(const char *path, struct SsCluster **out);

// # Safety
// `c` must come from [`ss_cluster_load`] and not be used afterwards.
void ss_cluster_free(struct SsCluster *c);

// Number of devices in a cluster, or 0 for a null handle.
//
// # Safety
// `c` must be null or a live cluster handle.
size_t ss_cluster_device_count(const struct SsCluster *c);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SsStatus ss_costs_load(const char *path, struct SsCosts **out);

// # Safety
// `c` must come from [`ss_costs_load`] and not be used afterwards.
void ss_costs_free(struct SsCosts *c);

// Compiles and simulates one strategy with default correction factors.
//
// # Safety
// All handles must be live and `out` writable. The strategy must have been
// loaded for `model`.
enum SsStatus ss_simulate(const struct SsModel *model,
                          const struct SsStrategy *strategy,
                          const struct SsCluster *cluster,
                          const struct SsCosts *costs,
                          double gamma,
                          struct SsReport **out);

// # Safety
// `r` must come from [`ss_simulate`] and not be used afterwards.
void ss_report_free(struct SsReport *r);

// Predicted iteration time in seconds, or NaN for a null handle.
//
// # Safety
// `r` must be null or a live report handle.
double ss_report_iteration_time(const struct SsReport *r);

// Samples per second, or NaN for a null handle.
//
// # Safety
// `r` must be null or a live report handle.
double ss_report_throughput(const struct SsReport *r);

// 1 if any device is predicted to run out of memory, 0 otherwise.
//
// # Safety
// `r` must be null or a live report handle.
int32_t ss_report_oom(const struct SsReport *r);

// # Safety
// `r` must be null or a live report handle.
size_t ss_report_device_count(const struct SsReport *r);

// Peak memory of one device in bytes.
//
// # Safety
// `r` must be a live report handle and `out` writable.
enum SsStatus ss_report_peak_bytes(const struct SsReport *r, size_t device, uint64_t *out);

// The full report as JSON; release it with [`ss_string_free`].
//
// # Safety
// `r` must be a live report handle and `out` writable.
enum SsStatus ss_report_to_json(const struct SsReport *r, char **out);

// # Safety
// `s` must be null or a string returned by this library, freed only once.
void ss_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRATSIM_H */
