#ifndef OSHAPE_H
#define OSHAPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OshapeStatus {
  OSHAPE_STATUS_OK = 0,
  OSHAPE_STATUS_NULL_POINTER = 1,
  OSHAPE_STATUS_INVALID_ARGUMENT = 2,
  OSHAPE_STATUS_CHECKPOINT = 3,
  OSHAPE_STATUS_IO = 4,
  OSHAPE_STATUS_NUMERIC = 5,
  OSHAPE_STATUS_BUFFER_TOO_SMALL = 6,
  OSHAPE_STATUS_PANIC = 7,
} OshapeStatus;

/**
 * A trained shaping model loaded from a checkpoint.
 */
typedef struct OshapeModel OshapeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len − 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t oshape_last_error(char *buf, size_t len);

/**
 * Load a shaped-model checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OshapeStatus oshape_model_load(const char *path, struct OshapeModel **out);

/**
 * Release a handle from [`oshape_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void oshape_model_free(struct OshapeModel *model);

/**
 * Alphabet size M, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t oshape_model_m(const struct OshapeModel *model);

/**
 * SNR (dB) the model was trained at, or NaN for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
double oshape_model_snr_db(const struct OshapeModel *model);

/**
 * Write the normalized constellation at `snr_db` into three arrays of
 * length `len ≥ M`.
 *
 * # Safety
 * `model` must be a live handle; `re`, `im`, `prob` must each point to
 * `len` writable doubles.
 */
enum OshapeStatus oshape_model_constellation(const struct OshapeModel *model,
                                             double snr_db,
                                             double *re,
                                             double *im,
                                             double *prob,
                                             size_t len);

/**
 * MI lower bound in bits over `n_frames` frames at `snr_db`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OshapeStatus oshape_model_eval_mi(const struct OshapeModel *model,
                                       double snr_db,
                                       size_t n_frames,
                                       uint64_t seed,
                                       double *out);

/**
 * Symbol error rate of the model's own demapper at `snr_db`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OshapeStatus oshape_model_eval_ser(const struct OshapeModel *model,
                                        double snr_db,
                                        size_t n_symbols,
                                        uint64_t seed,
                                        double *out);

/**
 * ACO-OFDM modulate `n_data` complex symbols into `4·n_data` real
 * samples, zero-clipped when `clipped` is true.
 *
 * # Safety
 * `re` and `im` must point to `n_data` doubles, `out` to `out_len`
 * writable doubles.
 */
enum OshapeStatus oshape_aco_modulate(size_t n_data,
                                      const double *re,
                                      const double *im,
                                      bool clipped,
                                      double *out,
                                      size_t out_len);

/**
 * PAPR in dB of `len` real samples.
 *
 * # Safety
 * `x` must point to `len` doubles and `out` be a valid pointer.
 */
enum OshapeStatus oshape_papr_db(const double *x, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OSHAPE_H */
