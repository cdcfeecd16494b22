#ifndef COMPLM_H
#define COMPLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ComplmStatus {
  COMPLM_STATUS_OK = 0,
  COMPLM_STATUS_NULL_POINTER = 1,
  COMPLM_STATUS_INVALID_UTF8 = 2,
  COMPLM_STATUS_INVALID_INPUT = 3,
  COMPLM_STATUS_SHAPE = 4,
  COMPLM_STATUS_TOKEN_RANGE = 5,
  COMPLM_STATUS_FORMAT = 6,
  COMPLM_STATUS_NON_FINITE = 7,
  COMPLM_STATUS_IO = 8,
  COMPLM_STATUS_JSON = 9,
  /**
   * The output buffer is too small; the required length was written.
   */
  COMPLM_STATUS_BUFFER_TOO_SMALL = 10,
  COMPLM_STATUS_PANIC = 11,
} ComplmStatus;

/**
 * A trained model: either a composite checkpoint or an LSTM LM with its
 * vocabulary.
 */
typedef struct ComplmModel ComplmModel;

/**
 * A subword vocabulary.
 */
typedef struct ComplmVocab ComplmVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null. The
 * pointer stays valid until the next `complm_*` call on the same thread.
 */
const char *complm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *complm_version(void);

/**
 * Loads a vocabulary file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum ComplmStatus complm_vocab_load(const char *path, struct ComplmVocab **out);

/**
 * Releases a vocabulary. Null is ignored.
 *
 * # Safety
 * `vocab` is null or came from [`complm_vocab_load`] and is not used again.
 */
void complm_vocab_free(struct ComplmVocab *vocab);

/**
 * Number of subwords, including the reserved ones. Zero for null.
 *
 * # Safety
 * `vocab` is null or a live handle.
 */
size_t complm_vocab_size(const struct ComplmVocab *vocab);

/**
 * Segments `text` into token ids, ending with the sentence terminator.
 *
 * The required length is always written to `out_len`. When it exceeds
 * `capacity`, nothing is copied and `BUFFER_TOO_SMALL` is returned; `ids`
 * may be null when `capacity` is zero.
 *
 * # Safety
 * `vocab` is live, `text` is NUL-terminated, `ids` is writable for
 * `capacity` elements, and `out_len` is writable.
 */
enum ComplmStatus complm_vocab_encode(const struct ComplmVocab *vocab,
                                      const char *text,
                                      uint32_t *ids,
                                      size_t capacity,
                                      size_t *out_len);

/**
 * Loads a model checkpoint. Composite checkpoints carry their own
 * vocabulary and ignore `vocab_path`; LSTM LM checkpoints need it.
 *
 * # Safety
 * `path` is NUL-terminated, `vocab_path` is null or NUL-terminated, and
 * `out` is writable.
 */
enum ComplmStatus complm_model_load(const char *path,
                                    const char *vocab_path,
                                    struct ComplmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` is null or came from [`complm_model_load`] and is not used again.
 */
void complm_model_free(struct ComplmModel *model);

/**
 * Number of entity components; zero for a plain LSTM LM or null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t complm_model_num_components(const struct ComplmModel *model);

/**
 * Natural-log probability of `text` followed by the sentence terminator.
 *
 * # Safety
 * `model` is live, `text` is NUL-terminated, `out` is writable.
 */
enum ComplmStatus complm_model_sentence_logprob(const struct ComplmModel *model,
                                                const char *text,
                                                double *out);

/**
 * Per-token log probabilities of `text`; one value per id that
 * [`complm_vocab_encode`] would produce. Buffer protocol as there.
 *
 * # Safety
 * `model` is live, `text` is NUL-terminated, `log_probs` is writable for
 * `capacity` elements, `out_len` is writable.
 */
enum ComplmStatus complm_model_token_logprobs(const struct ComplmModel *model,
                                              const char *text,
                                              double *log_probs,
                                              size_t capacity,
                                              size_t *out_len);

/**
 * Per-token perplexity of `count` sentences.
 *
 * # Safety
 * `model` is live, `sentences` points to `count` NUL-terminated strings,
 * `out` is writable.
 */
enum ComplmStatus complm_model_perplexity(const struct ComplmModel *model,
                                          const char *const *sentences,
                                          size_t count,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPLM_H */
