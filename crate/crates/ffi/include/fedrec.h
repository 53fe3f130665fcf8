#ifndef FEDREC_H
#define FEDREC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum FedrecStatus {
  FEDREC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FEDREC_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad input: arguments, files, stage or shape.
   */
  FEDREC_STATUS_INVALID_INPUT = 2,
  /**
   * Malformed embedding file or wire message.
   */
  FEDREC_STATUS_FORMAT = 3,
  FEDREC_STATUS_IO = 4,
  /**
   * A computation failed.
   */
  FEDREC_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  FEDREC_STATUS_PANIC = 6,
} FedrecStatus;

/**
 * Embedding table with its processing stage.
 */
typedef struct FedrecEmbeddings FedrecEmbeddings;

/**
 * Byte buffer owned by the library; release with `fedrec_buffer_free`.
 */
typedef struct FedrecBuffer {
  uint8_t *data;
  size_t len;
} FedrecBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null.
 */
const char *fedrec_last_error(void);

/**
 * Read an `SFUB` embedding file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum FedrecStatus fedrec_embeddings_read(const char *path, struct FedrecEmbeddings **out);

/**
 * Write a table as an `SFUB` file.
 *
 * # Safety
 * `emb` must be a live handle; `path` a nul-terminated string.
 */
enum FedrecStatus fedrec_embeddings_write(const struct FedrecEmbeddings *emb, const char *path);

/**
 * Raw table from `rows * dim` row-major floats.
 *
 * # Safety
 * `data` must point to `rows * dim` floats; `out` must be writable.
 */
enum FedrecStatus fedrec_embeddings_from_raw(const float *data,
                                             size_t rows,
                                             size_t dim,
                                             struct FedrecEmbeddings **out);

/**
 * Random unit-norm raw rows; `clusters = 0` gives i.i.d. rows.
 *
 * # Safety
 * `out` must be writable.
 */
enum FedrecStatus fedrec_embeddings_synth(size_t rows,
                                          size_t dim,
                                          size_t clusters,
                                          uint64_t seed,
                                          struct FedrecEmbeddings **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `emb` must be null or a live handle.
 */
size_t fedrec_embeddings_rows(const struct FedrecEmbeddings *emb);

/**
 * Row width, or 0 for a null handle.
 *
 * # Safety
 * `emb` must be null or a live handle.
 */
size_t fedrec_embeddings_dim(const struct FedrecEmbeddings *emb);

/**
 * Stage tag: 0 raw, 1 perturbed, 2 encrypted, 3 synchronized; -1 for null.
 *
 * # Safety
 * `emb` must be null or a live handle.
 */
int32_t fedrec_embeddings_stage(const struct FedrecEmbeddings *emb);

/**
 * Copy the row-major values into `buf`, which holds `len` floats.
 *
 * # Safety
 * `emb` must be a live handle and `buf` valid for `len` writes.
 */
enum FedrecStatus fedrec_embeddings_copy(const struct FedrecEmbeddings *emb,
                                         float *buf,
                                         size_t len);

/**
 * # Safety
 * `emb` must be null or a handle not yet freed.
 */
void fedrec_embeddings_free(struct FedrecEmbeddings *emb);

/**
 * Perturb and nearest-neighbour replace a raw table. When
 * `replacement_map` is non-null it receives one source index per row.
 *
 * # Safety
 * `raw` must be a live handle, `out` writable, and `replacement_map` null
 * or valid for `rows` writes.
 */
enum FedrecStatus fedrec_encrypt(const struct FedrecEmbeddings *raw,
                                 double sigma,
                                 uint64_t seed,
                                 struct FedrecEmbeddings **out,
                                 size_t *replacement_map);

/**
 * Mean row-wise cosine similarity between a raw and a protected table.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum FedrecStatus fedrec_audit_similarity(const struct FedrecEmbeddings *raw,
                                          const struct FedrecEmbeddings *masked,
                                          double *out);

/**
 * Serialize an encrypted table as an upload message.
 *
 * # Safety
 * `domain` must be a nul-terminated string, `enc` a live handle and `out`
 * writable.
 */
enum FedrecStatus fedrec_upload_encode(const char *domain,
                                       const struct FedrecEmbeddings *enc,
                                       struct FedrecBuffer *out);

/**
 * Parse an upload message back into its encrypted table.
 *
 * # Safety
 * `data` must be valid for `len` reads and `out` writable.
 */
enum FedrecStatus fedrec_upload_decode(const uint8_t *data,
                                       size_t len,
                                       struct FedrecEmbeddings **out);

/**
 * # Safety
 * `buf` must come from this library and not have been freed.
 */
void fedrec_buffer_free(struct FedrecBuffer buf);

/**
 * One server round over `n` encrypted uploads. `out` receives `n`
 * synchronized handles in upload order; `inertia` may be null.
 *
 * # Safety
 * `uploads` and `domains` must hold `n` live handles and nul-terminated
 * strings; `out` must be valid for `n` writes.
 */
enum FedrecStatus fedrec_federate(const struct FedrecEmbeddings *const *uploads,
                                  const char *const *domains,
                                  size_t n,
                                  size_t k,
                                  size_t max_iter,
                                  double tol,
                                  uint64_t seed,
                                  struct FedrecEmbeddings **out,
                                  double *inertia);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDREC_H */
