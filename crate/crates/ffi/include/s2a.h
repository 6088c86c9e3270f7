#ifndef S2A_H
#define S2A_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum S2aStatus {
  S2A_STATUS_OK = 0,
  S2A_STATUS_NULL_POINTER = 1,
  S2A_STATUS_INVALID_ARGUMENT = 2,
  S2A_STATUS_DIMENSION = 3,
  S2A_STATUS_NUMERIC = 4,
  S2A_STATUS_PARSE = 5,
  S2A_STATUS_CONFIG = 6,
  S2A_STATUS_BUFFER_TOO_SMALL = 7,
  S2A_STATUS_INTERNAL = 8,
  S2A_STATUS_PANIC = 9,
} S2aStatus;

// Packed low-bit activation record.
typedef struct S2aQuantBlob S2aQuantBlob;

// Dense `f32` tensor.
typedef struct S2aTensor S2aTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next failing call on the same thread.
const char *s2a_last_error_message(void);

// Static, NUL-terminated name of `status`.
const char *s2a_status_name(enum S2aStatus status);

// Copies `data_len` floats into a new tensor of the given shape.
//
// # Safety
// `shape` must point to `rank` values, `data` to `data_len` values and
// `out` to writable storage for one pointer.
enum S2aStatus s2a_tensor_new(const uintptr_t *shape,
                              uintptr_t rank,
                              const float *data,
                              uintptr_t data_len,
                              struct S2aTensor **out);

// # Safety
// `t` must be null or a handle from this library that was not yet freed.
void s2a_tensor_free(struct S2aTensor *t);

// Element count, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live tensor handle.
uintptr_t s2a_tensor_numel(const struct S2aTensor *t);

// Copies the tensor's values into `dst`, which must hold `numel` floats.
//
// # Safety
// `t` must be a live tensor handle and `dst` writable for `dst_len` floats.
enum S2aStatus s2a_tensor_copy_data(const struct S2aTensor *t, float *dst, uintptr_t dst_len);

// Per-tensor asymmetric quantization to `bits` bits.
//
// # Safety
// `t` must be a live tensor handle and `out` writable.
enum S2aStatus s2a_quantize(const struct S2aTensor *t, uint8_t bits, struct S2aQuantBlob **out);

// # Safety
// `q` must be a live blob handle and `out` writable.
enum S2aStatus s2a_dequantize(const struct S2aQuantBlob *q, struct S2aTensor **out);

// # Safety
// `q` must be null or a blob handle from this library that was not yet freed.
void s2a_quant_blob_free(struct S2aQuantBlob *q);

// Bytes the blob accounts for when kept as a saved activation.
//
// # Safety
// `q` must be null or a live blob handle.
uint64_t s2a_quant_blob_storage_bytes(const struct S2aQuantBlob *q);

// Scale and offset of the affine code mapping.
//
// # Safety
// `q` must be a live blob handle; `scale` and `min` must be writable.
enum S2aStatus s2a_quant_blob_params(const struct S2aQuantBlob *q, float *scale, float *min);

// Serializes the blob into `buf`. `written` always receives the required
// size, so a call with `cap = 0` queries it.
//
// # Safety
// `q` must be a live blob handle, `buf` writable for `cap` bytes (or null
// with `cap = 0`) and `written` writable.
enum S2aStatus s2a_quant_blob_to_bytes(const struct S2aQuantBlob *q,
                                       uint8_t *buf,
                                       uintptr_t cap,
                                       uintptr_t *written);

// # Safety
// `buf` must be readable for `len` bytes and `out` writable.
enum S2aStatus s2a_quant_blob_from_bytes(const uint8_t *buf,
                                         uintptr_t len,
                                         struct S2aQuantBlob **out);

// Memory report for `arch` (`vit_b_16` or `toy_vit`) tuned with `method`
// at `batch`, as a JSON string to be released with [`s2a_string_free`].
//
// # Safety
// `arch` and `method` must be NUL-terminated strings; `out` writable.
enum S2aStatus s2a_estimate_memory_json(const char *arch,
                                        const char *method,
                                        uint64_t batch,
                                        char **out);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void s2a_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S2A_H */
