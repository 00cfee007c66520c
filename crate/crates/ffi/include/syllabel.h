#ifndef SYLLABEL_H
#define SYLLABEL_H

/* Generated by cbindgen from syllabel-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum SyllabelStatus {
  SYLLABEL_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  SYLLABEL_STATUS_NULL_ARGUMENT = 1,
  /**
   * An input string was not valid UTF-8.
   */
  SYLLABEL_STATUS_INVALID_UTF8 = 2,
  /**
   * The checkpoint could not be read; see `syllabel_last_error_message`.
   */
  SYLLABEL_STATUS_LOAD_FAILED = 3,
  /**
   * The input line contained no phones.
   */
  SYLLABEL_STATUS_EMPTY_INPUT = 4,
  /**
   * Inference failed; see `syllabel_last_error_message`.
   */
  SYLLABEL_STATUS_SYLLABIFY_FAILED = 5,
  /**
   * A panic was caught at the FFI boundary.
   */
  SYLLABEL_STATUS_INTERNAL_ERROR = 6,
} SyllabelStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct SyllabelModel SyllabelModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or NULL when
 * the last call succeeded. The pointer is valid until the next call into
 * this library from the same thread; do not free it.
 */
const char *syllabel_last_error_message(void);

/**
 * Library version as a static NUL-terminated string; do not free it.
 */
const char *syllabel_version(void);

/**
 * Loads a checkpoint from `path` into a newly allocated model handle.
 *
 * On success writes the handle to `out_model` and returns `Ok`; the
 * caller must release it with `syllabel_model_free`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out_model` to a valid
 * pointer slot.
 */
enum SyllabelStatus syllabel_model_load(const char *path, struct SyllabelModel **out_model);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be a handle returned by `syllabel_model_load` that has not
 * been freed already.
 */
void syllabel_model_free(struct SyllabelModel *model);

/**
 * Vocabulary size of the loaded model, reserved tokens included.
 * Returns 0 when `model` is NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle from `syllabel_model_load`.
 */
size_t syllabel_model_vocab_size(const struct SyllabelModel *model);

/**
 * Syllabifies one line of phones (tokenized per the model's lexicon
 * format; phones unseen in training are fed to the network as UNK).
 *
 * On success writes a newly allocated NUL-terminated string to `out_text`;
 * release it with `syllabel_string_free`.
 *
 * # Safety
 * `model` must be a live handle, `phones` a NUL-terminated string, and
 * `out_text` a valid pointer slot.
 */
enum SyllabelStatus syllabel_syllabify(const struct SyllabelModel *model,
                                       const char *phones,
                                       char **out_text);

/**
 * Frees a string returned by `syllabel_syllabify`. NULL is ignored.
 *
 * # Safety
 * `s` must be a pointer returned by this library that has not been freed
 * already.
 */
void syllabel_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYLLABEL_H */
