#ifndef DRIFTHARNESS_H
#define DRIFTHARNESS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum DhStatus {
  DH_STATUS_OK = 0,
  DH_STATUS_NULL_POINTER = 1,
  DH_STATUS_INVALID_UTF8 = 2,
  DH_STATUS_INVALID_ARGUMENT = 3,
  DH_STATUS_IO = 4,
  DH_STATUS_PARSE = 5,
  DH_STATUS_CONFIG = 6,
  DH_STATUS_MODEL = 7,
  DH_STATUS_METRIC = 8,
  DH_STATUS_LEAKAGE = 9,
  DH_STATUS_PROTOCOL = 10,
  DH_STATUS_PANIC = 11,
} DhStatus;

/**
 * A run ledger loaded from disk.
 */
typedef struct DhLedger DhLedger;

/**
 * A reference-model instance.
 */
typedef struct DhModel DhModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *dh_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dh_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void dh_string_free(char *s);

/**
 * Hex digest of the normalized form of `code`. Free the result with
 * [`dh_string_free`].
 *
 * # Safety
 * `code` must be a NUL-terminated string; `out` must be writable.
 */
enum DhStatus dh_normalized_key(const char *code, char **out);

/**
 * Macro-F1 over `n` binary labels and predictions.
 *
 * # Safety
 * `labels` and `predictions` must point to `n` bytes each; `out` must be writable.
 */
enum DhStatus dh_macro_f1(const uint8_t *labels, const uint8_t *predictions, size_t n, double *out);

/**
 * Two-sided Wilcoxon signed-rank test on paired differences.
 *
 * # Safety
 * `diffs` must point to `n` doubles; the outputs must be writable.
 */
enum DhStatus dh_wilcoxon(const double *diffs, size_t n, double *statistic, double *p_value);

/**
 * Cliff's delta of sample `a` against sample `b`.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` doubles; `out` must be writable.
 */
enum DhStatus dh_cliffs_delta(const double *a, size_t na, const double *b, size_t nb, double *out);

/**
 * Retention AUC from IBR values at lags 1, 3, 5 and 6.
 *
 * # Safety
 * `ibr` must point to 4 doubles; `out` must be writable.
 */
enum DhStatus dh_retention_auc(const double *ibr, double *out);

/**
 * Decay rate `(IBR@1 - IBR@6) / IBR@1` from IBR values at lags 1, 3, 5 and 6.
 *
 * # Safety
 * `ibr` must point to 4 doubles; `out` must be writable.
 */
enum DhStatus dh_decay_rate(const double *ibr, double *out);

/**
 * Deduplicates and windows a corpus file into `out_dir`, as the `prepare`
 * command does. `granularity_months` is 1, 2, 3, 6 or 12.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `window_count` may be null.
 */
enum DhStatus dh_prepare_corpus(const char *corpus_path,
                                const char *out_dir,
                                uint32_t granularity_months,
                                size_t *window_count);

/**
 * Creates an untrained model. `adapter_config_json` may be null for defaults.
 *
 * # Safety
 * `adapter_config_json` must be null or NUL-terminated; `out` must be writable.
 */
enum DhStatus dh_model_new(const char *adapter_config_json, struct DhModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library that has not been freed.
 */
void dh_model_free(struct DhModel *model);

/**
 * Fine-tunes the adapter on every instance of a corpus file.
 * `train_config_json` may be null for defaults; `final_loss` may be null.
 *
 * # Safety
 * `model` must be a live handle; strings must be NUL-terminated or null where allowed.
 */
enum DhStatus dh_model_train(struct DhModel *model,
                             const char *corpus_path,
                             const char *train_config_json,
                             double *final_loss);

/**
 * Probability that `code` is vulnerable.
 *
 * # Safety
 * `model` must be a live handle; `code` NUL-terminated; `out` writable.
 */
enum DhStatus dh_model_predict(struct DhModel *model, const char *code, double *out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum DhStatus dh_model_save(struct DhModel *model, const char *path);

/**
 * Restores a model from a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum DhStatus dh_model_load(const char *path, struct DhModel **out);

/**
 * Loads a ledger directory written by a run.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` writable.
 */
enum DhStatus dh_ledger_load(const char *dir, struct DhLedger **out);

/**
 * # Safety
 * `ledger` must be null or a handle from this library that has not been freed.
 */
void dh_ledger_free(struct DhLedger *ledger);

/**
 * Number of forward records, scored or not.
 *
 * # Safety
 * `ledger` must be a live handle; `out` writable.
 */
enum DhStatus dh_ledger_forward_count(const struct DhLedger *ledger, size_t *out);

/**
 * Mean forward Macro-F1 over the scored windows.
 *
 * # Safety
 * `ledger` must be a live handle; `out` writable.
 */
enum DhStatus dh_ledger_mean_forward_f1(const struct DhLedger *ledger, double *out);

/**
 * Mean backward score at lag `k`.
 *
 * # Safety
 * `ledger` must be a live handle; `out` writable.
 */
enum DhStatus dh_ledger_ibr(const struct DhLedger *ledger, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFTHARNESS_H */
