#ifndef NOWCAST_H
#define NOWCAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum NowcastStatus {
  NOWCAST_STATUS_OK = 0,
  NOWCAST_STATUS_NULL_POINTER = 1,
  NOWCAST_STATUS_INVALID_UTF8 = 2,
  NOWCAST_STATUS_INVALID_ARGUMENT = 3,
  NOWCAST_STATUS_IO = 4,
  NOWCAST_STATUS_PANIC = 5,
} NowcastStatus;

// Trained tf-idf vocabulary, ridge regressor and optional outlier filter.
typedef struct NowcastModel NowcastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until the next call.
const char *nowcast_last_error(void);

// Library version as a static string.
const char *nowcast_version(void);

// Release a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void nowcast_string_free(char *s);

// Load `tfidf.json`, `ridge.json` and, when present, `ocsvm.json` from a model directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum NowcastStatus nowcast_model_load(const char *dir, struct NowcastModel **out);

// Release a model. NULL is ignored.
//
// # Safety
// `model` must come from [`nowcast_model_load`] and not have been freed.
void nowcast_model_free(struct NowcastModel *model);

// Sentiment score of one sentence.
//
// # Safety
// `model` must be a live model, `text` NUL-terminated, `out` writable.
enum NowcastStatus nowcast_model_score(const struct NowcastModel *model,
                                       const char *text,
                                       double *out);

// Outlier-filter decision value of one sentence; negative means off-topic.
//
// # Safety
// `model` must be a live model, `text` NUL-terminated, `out` writable.
enum NowcastStatus nowcast_model_decision(const struct NowcastModel *model,
                                          const char *text,
                                          double *out);

// Tokens of `text` as a JSON array of strings. Free with [`nowcast_string_free`].
//
// # Safety
// `text` must be NUL-terminated; `out` must be writable.
enum NowcastStatus nowcast_tokenize(const char *text, char **out);

// Pearson correlation of two length-`n` arrays.
//
// # Safety
// `a` and `b` must point to `n` readable doubles; `out` must be writable.
enum NowcastStatus nowcast_pearson(const double *a, const double *b, size_t n, double *out);

// Diffusion index from five response counts in ◎ ○ □ △ × order.
//
// # Safety
// `counts` must point to 5 readable values; `out` must be writable.
enum NowcastStatus nowcast_diffusion_index(const uint64_t *counts, double *out);

// Attention rollout for the first token. `attention` holds `layers × heads × n × n`
// row-stochastic weights in row-major order; `out` receives `n` values.
//
// # Safety
// `attention` must hold `layers * heads * n * n` doubles; `out` must hold `n`.
enum NowcastStatus nowcast_attention_rollout(const double *attention,
                                             size_t layers,
                                             size_t heads,
                                             size_t n,
                                             double *out);

// Exact Gaussian log-likelihood of a panel under a factor-model spec given as JSON
// (`beta0`, `gamma`, `phi`, `d`, `var_eta`, `var_eps`). `y` is `n_series × t_len`
// row-major; NaN marks a missing value.
//
// # Safety
// `spec_json` must be NUL-terminated, `y` must hold `n_series * t_len` doubles and
// `out` must be writable.
enum NowcastStatus nowcast_dfm_loglik(const char *spec_json,
                                      const double *y,
                                      size_t n_series,
                                      size_t t_len,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOWCAST_H */
