#ifndef DYNLITE_H
#define DYNLITE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DlScheme {
  DL_SCHEME_F32 = 0,
  DL_SCHEME_E0M4 = 1,
  DL_SCHEME_INT4 = 2,
} DlScheme;

typedef enum DlStatus {
  DL_STATUS_OK = 0,
  DL_STATUS_NULL_ARGUMENT = 1,
  DL_STATUS_INVALID_ARGUMENT = 2,
  DL_STATUS_IO = 3,
  DL_STATUS_GRAPH = 4,
  DL_STATUS_WEIGHTS = 5,
  DL_STATUS_QUANT = 6,
  DL_STATUS_EXEC = 7,
  DL_STATUS_BUFFER_TOO_SMALL = 8,
  DL_STATUS_PANIC = 9,
} DlStatus;

typedef struct DlEngine DlEngine;

/**
 * A graph together with its weights.
 */
typedef struct DlModel DlModel;

typedef struct DlQuantGroup DlQuantGroup;

/**
 * Snapshot of an engine's cumulative work counters.
 */
typedef struct DlCounters {
  uint64_t shape_updates;
  uint64_t shape_ops_executed;
  uint64_t sync_points;
  uint64_t allocations;
  uint64_t kv_copy_bytes;
} DlCounters;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Empty if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *dl_last_error(void);

/**
 * Loads a graph JSON file and its LGW1 weight file.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum DlStatus dl_model_load(const char *graph_path, const char *weights_path, struct DlModel **out);

/**
 * Builds the synthetic toy decoder in memory.
 *
 * # Safety
 * `out` must be writable.
 */
enum DlStatus dl_model_build_toy(uintptr_t layers,
                                 uintptr_t hidden,
                                 uintptr_t heads,
                                 uintptr_t head_dim,
                                 uintptr_t vocab,
                                 uint64_t seed,
                                 int64_t max_seq,
                                 struct DlModel **out);

/**
 * # Safety
 * `model` must come from a `dl_model_*` constructor or be null.
 */
void dl_model_free(struct DlModel *model);

/**
 * Compiles an engine for `model`. With `naive` set, the engine is the
 * unoptimized reference interpreter. The model may be freed afterwards.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum DlStatus dl_engine_new(const struct DlModel *model,
                            uintptr_t pad,
                            enum DlScheme scheme,
                            uint8_t n,
                            uintptr_t group_size,
                            bool naive,
                            struct DlEngine **out);

/**
 * # Safety
 * `engine` must come from `dl_engine_new` or be null.
 */
void dl_engine_free(struct DlEngine *engine);

/**
 * Greedy decoding. Writes `max_new` tokens into `tokens_out` and their
 * count into `written`. Returns `BufferTooSmall` without running if
 * `capacity < max_new`.
 *
 * # Safety
 * `prompt` must hold `prompt_len` values and `tokens_out` `capacity` values.
 */
enum DlStatus dl_engine_generate(struct DlEngine *engine,
                                 const int64_t *prompt,
                                 uintptr_t prompt_len,
                                 uintptr_t max_new,
                                 int64_t *tokens_out,
                                 uintptr_t capacity,
                                 uintptr_t *written);

/**
 * Cumulative counters since the engine was created.
 *
 * # Safety
 * `engine` must be live; `out` must be writable.
 */
enum DlStatus dl_engine_counters(const struct DlEngine *engine, struct DlCounters *out);

/**
 * Quantizes one group of weights to E0M4 with exponent parameter `n`.
 *
 * # Safety
 * `values` must hold `len` floats; `out` must be writable.
 */
enum DlStatus dl_quantize_e0m4(const float *values,
                               uintptr_t len,
                               uint8_t n,
                               struct DlQuantGroup **out);

/**
 * Number of values in the group, or 0 for a null handle.
 *
 * # Safety
 * `group` must be live or null.
 */
uintptr_t dl_quant_group_len(const struct DlQuantGroup *group);

/**
 * The 4-bit code of element `i`, or 0xFF when out of range.
 *
 * # Safety
 * `group` must be live or null.
 */
uint8_t dl_quant_group_code(const struct DlQuantGroup *group, uintptr_t i);

/**
 * Reconstructs the group into `out`.
 *
 * # Safety
 * `group` must be live; `out` must hold `capacity` floats.
 */
enum DlStatus dl_quant_group_dequantize(const struct DlQuantGroup *group,
                                        float *out,
                                        uintptr_t capacity);

/**
 * # Safety
 * `group` must come from `dl_quantize_e0m4` or be null.
 */
void dl_quant_group_free(struct DlQuantGroup *group);

/**
 * Round-to-nearest-even narrowing to binary16 bits.
 */
uint16_t dl_f32_to_f16(float x);

float dl_f16_to_f32(uint16_t bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNLITE_H */
