#ifndef HIERNMT_H
#define HIERNMT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HnStatus {
  HN_STATUS_OK = 0,
  HN_STATUS_NULL_ARGUMENT = 1,
  HN_STATUS_INVALID_UTF8 = 2,
  HN_STATUS_INVALID_INPUT = 3,
  HN_STATUS_INFEASIBLE = 4,
  HN_STATUS_IO = 5,
  HN_STATUS_MODEL = 6,
  HN_STATUS_BUFFER_TOO_SMALL = 7,
  HN_STATUS_PANIC = 8,
} HnStatus;

typedef struct HnAllocation HnAllocation;

typedef struct HnTranslator HnTranslator;

typedef struct HnTree HnTree;

typedef struct HnVocab HnVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *hn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hn_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void hn_string_free(char *s);

/**
 * Parses a tree in parenthesised form, e.g. `((az,tr),de)`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum HnStatus hn_tree_parse(const char *spec, struct HnTree **out);

/**
 * # Safety
 * `tree` must come from [`hn_tree_parse`] and not have been freed.
 */
void hn_tree_free(struct HnTree *tree);

/**
 * # Safety
 * `tree` must be a live handle.
 */
size_t hn_tree_num_leaves(const struct HnTree *tree);

/**
 * Canonical rendering of the tree; free with [`hn_string_free`].
 *
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum HnStatus hn_tree_render(const struct HnTree *tree, char **out);

/**
 * Spreads `depth_budget` layers over the tree so every leaf path sums to it.
 *
 * # Safety
 * `tree` must be a live handle; `out` must be writable.
 */
enum HnStatus hn_allocate_layers(const struct HnTree *tree,
                                 size_t depth_budget,
                                 struct HnAllocation **out);

/**
 * # Safety
 * `alloc` must come from [`hn_allocate_layers`] and not have been freed.
 */
void hn_allocation_free(struct HnAllocation *alloc);

/**
 * Layers of one node; `node_id` joins leaf codes with `+` (`az+tr`).
 *
 * # Safety
 * `alloc` must be a live handle, `node_id` NUL-terminated, `layers` writable.
 */
enum HnStatus hn_allocation_layers(const struct HnAllocation *alloc,
                                   const char *node_id,
                                   size_t *layers);

/**
 * Encoder and decoder depths of the full-sharing baseline.
 *
 * # Safety
 * Both allocations must be live handles; outputs must be writable.
 */
enum HnStatus hn_baseline_depths(const struct HnAllocation *enc,
                                 const struct HnAllocation *dec,
                                 size_t *enc_layers,
                                 size_t *dec_layers);

/**
 * Loads a vocabulary file written by `hiernmt vocab learn`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum HnStatus hn_vocab_load(const char *path, struct HnVocab **out);

/**
 * # Safety
 * `vocab` must come from [`hn_vocab_load`] and not have been freed.
 */
void hn_vocab_free(struct HnVocab *vocab);

/**
 * # Safety
 * `vocab` must be a live handle.
 */
size_t hn_vocab_size(const struct HnVocab *vocab);

/**
 * Encodes a sentence with BOS and EOS into `ids`. `len` receives the
 * required length; `HN_STATUS_BUFFER_TOO_SMALL` when it exceeds `capacity`.
 *
 * # Safety
 * `ids` must have room for `capacity` values (may be null when 0).
 */
enum HnStatus hn_vocab_encode(const struct HnVocab *vocab,
                              const char *sentence,
                              uint32_t *ids,
                              size_t capacity,
                              size_t *len);

/**
 * Detokenises `ids`; free the result with [`hn_string_free`].
 *
 * # Safety
 * `ids` must point to `len` values.
 */
enum HnStatus hn_vocab_decode(const struct HnVocab *vocab,
                              const uint32_t *ids,
                              size_t len,
                              char **out);

/**
 * Opens a checkpoint written by `hiernmt train` with its vocabulary.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum HnStatus hn_translator_open(const char *checkpoint_path,
                                 const char *vocab_path,
                                 struct HnTranslator **out);

/**
 * # Safety
 * `t` must come from [`hn_translator_open`] and not have been freed.
 */
void hn_translator_free(struct HnTranslator *t);

/**
 * Greedy translation of one sentence; free the result with
 * [`hn_string_free`].
 *
 * # Safety
 * `t` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum HnStatus hn_translate(const struct HnTranslator *t,
                           const char *src_lang,
                           const char *tgt_lang,
                           const char *sentence,
                           char **out);

/**
 * Corpus BLEU (0-100) of `n` whitespace-tokenised candidates against one
 * reference each.
 *
 * # Safety
 * `candidates` and `references` must each point to `n` NUL-terminated strings.
 */
enum HnStatus hn_corpus_bleu(const char *const *candidates,
                             const char *const *references,
                             size_t n,
                             double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERNMT_H */
