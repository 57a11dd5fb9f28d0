#ifndef SEQGUARD_H
#define SEQGUARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values match the exit codes of the command-line tool.
 */
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_IO = 3,
  SG_STATUS_FORMAT = 4,
  SG_STATUS_EMPTY_DATA = 5,
  SG_STATUS_NUMERICAL = 6,
  SG_STATUS_DIVERGENCE = 7,
  SG_STATUS_NULL_POINTER = 8,
  SG_STATUS_PANIC = 9,
} SgStatus;

/**
 * Last stage a pipeline run executes.
 */
typedef enum SgStage {
  SG_STAGE_DATA = 0,
  SG_STAGE_CLEAN = 1,
  SG_STAGE_INJECT = 2,
  SG_STAGE_COMPROMISED = 3,
  SG_STAGE_DUAL_VIEW = 4,
  SG_STAGE_DETECT = 5,
  SG_STAGE_INFLUENCE = 6,
  SG_STAGE_RECTIFY = 7,
  SG_STAGE_REPORT = 8,
} SgStage;

/**
 * Experiment configuration.
 */
typedef struct SgConfig SgConfig;

/**
 * An interaction corpus.
 */
typedef struct SgCorpus SgCorpus;

/**
 * A trained recommender and its parameters.
 */
typedef struct SgModel SgModel;

/**
 * Headline numbers of a full pipeline run. Fields that do not apply are NaN.
 */
typedef struct SgPipelineSummary {
  double clean_ndcg10;
  double compromised_ndcg10;
  double rectified_ndcg10;
  double detection_precision;
  double detection_recall;
  uint64_t fake_orders;
  uint64_t flagged;
  uint64_t harmful;
} SgPipelineSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length, or 0
 * when there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sg_last_error(char *buf, size_t len);

/**
 * Writes a new default configuration to `*out`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SgStatus sg_config_new(struct SgConfig **out);

/**
 * Parses a JSON configuration document; missing fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SgStatus sg_config_from_json(const char *json, struct SgConfig **out);

/**
 * Sets the root seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum SgStatus sg_config_set_seed(struct SgConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not used afterwards.
 */
void sg_config_free(struct SgConfig *cfg);

/**
 * Builds the corpus named by the configuration's dataset section.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum SgStatus sg_corpus_from_config(const struct SgConfig *cfg, struct SgCorpus **out);

/**
 * Reads a corpus snapshot (`corpus.json` / `compromised.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SgStatus sg_corpus_load(const char *path, struct SgCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle.
 */
size_t sg_corpus_num_users(const struct SgCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle.
 */
size_t sg_corpus_num_items(const struct SgCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle.
 */
size_t sg_corpus_num_interactions(const struct SgCorpus *corpus);

/**
 * # Safety
 * `corpus` must be null or a handle from this library, not used afterwards.
 */
void sg_corpus_free(struct SgCorpus *corpus);

/**
 * Loads a recommender checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SgStatus sg_model_load(const char *path, struct SgModel **out);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t sg_model_vocab(const struct SgModel *model);

/**
 * Next-item logits after `prefix` (dense item indices) into `scores`, which
 * must hold exactly the model's vocabulary size.
 *
 * # Safety
 * `prefix` must point to `len` items and `scores` to `scores_len` doubles.
 */
enum SgStatus sg_model_next_item_scores(const struct SgModel *model,
                                        const uint32_t *prefix,
                                        size_t len,
                                        double *scores,
                                        size_t scores_len);

/**
 * # Safety
 * `model` must be null or a handle from this library, not used afterwards.
 */
void sg_model_free(struct SgModel *model);

/**
 * Jensen-Shannon divergence (natural log) of two distributions of length `n`.
 *
 * # Safety
 * `p` and `q` must point to `n` doubles; `out` must be valid.
 */
enum SgStatus sg_jensen_shannon(const double *p, const double *q, size_t n, double *out);

/**
 * Runs the pipeline up to `until` with outputs in `out_dir`. When `until` is
 * the report stage and `summary` is non-null, it receives the headline
 * numbers.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` a NUL-terminated string and
 * `summary` null or valid.
 */
enum SgStatus sg_pipeline_run(const struct SgConfig *cfg,
                              const char *out_dir,
                              enum SgStage until,
                              bool resume,
                              struct SgPipelineSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQGUARD_H */
