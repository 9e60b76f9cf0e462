#ifndef MMCOT_H
#define MMCOT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmcotStatus {
  MMCOT_STATUS_OK = 0,
  MMCOT_STATUS_NULL_POINTER = 1,
  MMCOT_STATUS_INVALID_UTF8 = 2,
  MMCOT_STATUS_INVALID_ARGUMENT = 3,
  MMCOT_STATUS_IO = 4,
  MMCOT_STATUS_FORMAT = 5,
  MMCOT_STATUS_MODEL = 6,
  MMCOT_STATUS_PANIC = 7,
} MmcotStatus;

/**
 * A loaded checkpoint. Opaque to C.
 */
typedef struct MmcotModel MmcotModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *mmcot_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmcot_version(void);

/**
 * Loads an MMCK checkpoint written by `mmcot train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MmcotStatus mmcot_model_load(const char *path, struct MmcotModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mmcot_model_load`] and not be freed twice.
 */
void mmcot_model_free(struct MmcotModel *model);

/**
 * Writes the feature shape the model expects (patches, feature width) and
 * its vocabulary size.
 *
 * # Safety
 * `model` must be a live model; the out pointers must be valid.
 */
enum MmcotStatus mmcot_model_shape(const struct MmcotModel *model,
                                   uintptr_t *patches,
                                   uintptr_t *vision_dim,
                                   uintptr_t *vocab_size);

/**
 * Greedy generation from `input` with a row-major `patches x vision_dim`
 * feature matrix. A null `features` means all zeros. The generated text is
 * written to `*out` and must be freed with [`mmcot_string_free`].
 *
 * # Safety
 * `input` must be NUL-terminated; `features`, when non-null, must point to
 * `n_features` floats; `out` must be valid.
 */
enum MmcotStatus mmcot_model_generate(const struct MmcotModel *model,
                                      const char *input,
                                      const float *features,
                                      uintptr_t n_features,
                                      uintptr_t max_new_tokens,
                                      char **out);

/**
 * RougeL F-measure between two texts.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be valid.
 */
enum MmcotStatus mmcot_rouge_l(const char *candidate, const char *reference, double *out);

/**
 * Token count of `text` under the library's tokenizer.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be valid.
 */
enum MmcotStatus mmcot_count_tokens(const char *text, uintptr_t *out);

/**
 * Extracts the answer index from generated text; `*out` is -1 when no
 * answer among the first `n_options` letters is found.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be valid.
 */
enum MmcotStatus mmcot_extract_answer(const char *text, uintptr_t n_options, int32_t *out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void mmcot_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMCOT_H */
