#ifndef PERMFILL_H
#define PERMFILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_ARGUMENT = 1,
  PF_STATUS_INVALID_UTF8 = 2,
  PF_STATUS_IO = 3,
  PF_STATUS_CONFIG = 4,
  PF_STATUS_CHECKPOINT = 5,
  PF_STATUS_INVALID_INPUT = 6,
  PF_STATUS_BUFFER_TOO_SMALL = 7,
  PF_STATUS_RUNTIME = 8,
  PF_STATUS_PANIC = 9,
} PfStatus;

/**
 * Opaque handle to a loaded corrector.
 */
typedef struct PfCorrector PfCorrector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pf_last_error(void);

/**
 * Library version as a static string.
 */
const char *pf_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void pf_string_free(char *s);

/**
 * Loads a checkpoint. `config_toml` may be null for the default settings;
 * otherwise it is TOML text in the command-line configuration format, of
 * which the search and decoder sections apply.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum PfStatus pf_corrector_load(const char *checkpoint_path,
                                const char *config_toml,
                                struct PfCorrector **out);

/**
 * Destroys a corrector. Null is ignored.
 *
 * # Safety
 * `c` must come from [`pf_corrector_load`] and not have been freed.
 */
void pf_corrector_free(struct PfCorrector *c);

/**
 * Sets the confidence bias used by subsequent calls.
 *
 * # Safety
 * `c` must be a live corrector not used concurrently.
 */
enum PfStatus pf_corrector_set_confidence_bias(struct PfCorrector *c, double bias);

/**
 * Corrects one sentence. On success `*out` holds a string to be released
 * with [`pf_string_free`].
 *
 * # Safety
 * `c` must be a live corrector, `sentence` NUL-terminated, `out` writable.
 */
enum PfStatus pf_correct(const struct PfCorrector *c, const char *sentence, char **out);

/**
 * Up to `k` hypotheses as a JSON array of `{"text", "score"}` objects, best
 * first.
 *
 * # Safety
 * As for [`pf_correct`].
 */
enum PfStatus pf_correct_topk(const struct PfCorrector *c,
                              const char *sentence,
                              size_t k,
                              char **out_json);

/**
 * Oracle permutation for a pair of sentinel-wrapped id sequences
 * (`2 .. 3`). Writes up to `cap` indices to `out_pi`, the full length to
 * `out_len` and whether the example is lossy to `out_lossy`. Returns
 * `BufferTooSmall` (with `out_len` set) when `cap` is insufficient.
 *
 * # Safety
 * Array arguments must be valid for their stated lengths.
 */
enum PfStatus pf_oracle_permutation(const uint32_t *src,
                                    size_t src_len,
                                    const uint32_t *tgt,
                                    size_t tgt_len,
                                    size_t s,
                                    size_t max_len,
                                    size_t *out_pi,
                                    size_t cap,
                                    size_t *out_len,
                                    bool *out_lossy);

/**
 * Beam search over a row-major `(n + s) x (n + s)` pointer matrix. Results
 * are written best first: hypothesis `h` occupies
 * `out_perms[h * (n + s) ..]` with length `out_lens[h]` and ranking score
 * `out_scores[h]`. All output arrays need room for `width` hypotheses.
 *
 * # Safety
 * `a` must hold `(n + s)^2` values and the outputs must be writable for the
 * sizes above.
 */
enum PfStatus pf_beam_search(const double *a,
                             size_t n,
                             size_t s,
                             size_t width,
                             double confidence_bias,
                             bool length_norm,
                             size_t *out_perms,
                             size_t *out_lens,
                             double *out_scores,
                             size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERMFILL_H */
