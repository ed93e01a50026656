#ifndef OPNET_H
#define OPNET_H

#pragma once

/* Generated by cbindgen from opnet-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Behavior selector mirrored across the C boundary.
typedef enum OpnetMode {
  OpnetMode_Plain = 0,
  OpnetMode_Mean = 1,
  OpnetMode_Optimistic = 2,
  OpnetMode_Pessimistic = 3,
} OpnetMode;

// Status codes returned by every FFI function.
typedef enum OpnetStatus {
  OpnetStatus_Ok = 0,
  // A required pointer was null.
  OpnetStatus_NullArgument = 1,
  // A path or string argument was not valid UTF-8.
  OpnetStatus_InvalidUtf8 = 2,
  // File could not be read.
  OpnetStatus_Io = 3,
  // File exists but is not a valid checkpoint.
  OpnetStatus_BadFormat = 4,
  // A numeric argument or buffer length is out of range.
  OpnetStatus_InvalidArgument = 5,
  // Input length does not match the network.
  OpnetStatus_ShapeMismatch = 6,
  // Any other engine failure.
  OpnetStatus_Internal = 7,
} OpnetStatus;

// Opaque network handle.
typedef struct OpnetNetwork OpnetNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message for the current thread, or null when the previous call
// succeeded. The pointer stays valid until the next failing call on this
// thread; do not free it.
const char *opnet_last_error_message(void);

// Loads a checkpoint into a fresh handle.
//
// # Safety
// `path` must point to a NUL-terminated string and `out` to writable
// storage for one pointer.
enum OpnetStatus opnet_network_load(const char *path, struct OpnetNetwork **out);

// Frees a handle returned by [`opnet_network_load`]. Null is a no-op.
//
// # Safety
// `net` must be a pointer from `opnet_network_load` not yet freed.
void opnet_network_free(struct OpnetNetwork *net);

// Number of input values the network expects (flattened length).
//
// # Safety
// `net` must be a live handle and `out` writable.
enum OpnetStatus opnet_network_input_len(const struct OpnetNetwork *net, size_t *out);

// Number of class scores the network produces.
//
// # Safety
// `net` must be a live handle and `out` writable.
enum OpnetStatus opnet_network_output_len(const struct OpnetNetwork *net, size_t *out);

// Single deterministic forward pass (dropout disabled).
//
// # Safety
// `net` must be a live handle; `input` must hold `input_len` doubles and
// `out` room for `out_len` doubles.
enum OpnetStatus opnet_forward_plain(const struct OpnetNetwork *net,
                                     const double *input,
                                     size_t input_len,
                                     double *out,
                                     size_t out_len);

// Behavior-adjusted class scores: `t` stochastic passes at dropout rate
// `p_drop` seeded by `seed`, reduced per `mode` at confidence level
// `1 - alpha`. `Plain` ignores `t`, `p_drop` and `alpha`.
//
// # Safety
// Pointer contracts as in [`opnet_forward_plain`].
enum OpnetStatus opnet_predict(const struct OpnetNetwork *net,
                               const double *input,
                               size_t input_len,
                               enum OpnetMode mode,
                               uint32_t t,
                               double p_drop,
                               double alpha,
                               uint64_t seed,
                               double *out,
                               size_t out_len);

// Full per-class sampling statistics: mean, variance and the confidence
// interval bounds. Each buffer must hold one double per output class.
//
// # Safety
// Pointer contracts as in [`opnet_forward_plain`]; all four output buffers
// must hold `out_len` doubles.
enum OpnetStatus opnet_predict_stats(const struct OpnetNetwork *net,
                                     const double *input,
                                     size_t input_len,
                                     uint32_t t,
                                     double p_drop,
                                     double alpha,
                                     uint64_t seed,
                                     double *out_mean,
                                     double *out_variance,
                                     double *out_lower,
                                     double *out_upper,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPNET_H */
