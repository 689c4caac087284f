#ifndef KAA_CAL_H
#define KAA_CAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KcStatus {
  KC_STATUS_OK = 0,
  KC_STATUS_NULL_ARGUMENT = 1,
  KC_STATUS_INVALID_UTF8 = 2,
  KC_STATUS_DIMENSION = 3,
  KC_STATUS_NUMERIC = 4,
  KC_STATUS_CONTRACT = 5,
  KC_STATUS_CONFIG = 6,
  KC_STATUS_BUDGET = 7,
  KC_STATUS_CONSISTENCY = 8,
  KC_STATUS_NO_SIGNAL = 9,
  KC_STATUS_LOOKUP = 10,
  KC_STATUS_DETERMINISM = 11,
  KC_STATUS_FORMAT = 12,
  KC_STATUS_VERSION = 13,
  KC_STATUS_IO = 14,
  KC_STATUS_JSON = 15,
  KC_STATUS_PANIC = 16,
} KcStatus;

// Synthetic dataset bundle.
typedef struct KcDataset KcDataset;

// Model bundle (student, teacher and heads) with its run position.
typedef struct KcModel KcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *kc_last_error(void);

// Short stable name of a status code.
const char *kc_status_name(enum KcStatus status);

// Generates a dataset. `config_json` may be null for defaults.
enum KcStatus kc_dataset_generate(const char *config_json, uint64_t seed, struct KcDataset **out);

enum KcStatus kc_dataset_load(const char *dir, struct KcDataset **out);

enum KcStatus kc_dataset_save(const struct KcDataset *dataset, const char *dir);

// Number of examples; 0 for a null handle.
size_t kc_dataset_len(const struct KcDataset *dataset);

// Values per image (channels × height × width); 0 for a null handle.
size_t kc_dataset_image_len(const struct KcDataset *dataset);

void kc_dataset_free(struct KcDataset *dataset);

// Trains a foundation model on `dataset`. `config_json` may be null.
enum KcStatus kc_model_train_kaa(const struct KcDataset *dataset,
                                 const char *config_json,
                                 struct KcModel **out);

enum KcStatus kc_model_load(const char *path, struct KcModel **out);

enum KcStatus kc_model_save(const struct KcModel *model, const char *path);

// Number of task heads; 0 for a null handle.
size_t kc_model_num_tasks(const struct KcModel *model);

// Predicted class per task for one channel-major image of `image_len`
// values. `labels` must have room for `num_tasks` entries.
enum KcStatus kc_model_predict(const struct KcModel *model,
                               const float *image,
                               size_t image_len,
                               uint32_t *labels,
                               size_t num_tasks);

// Mean per-task accuracy on `split` (`train`, `val`, `test` or `joint`).
enum KcStatus kc_model_evaluate(const struct KcModel *model,
                                const struct KcDataset *dataset,
                                const char *split,
                                double *accuracy);

void kc_model_free(struct KcModel *model);

// Gradient check on the toy model. `precision` is 32 or 64. Writes the
// maximum relative error; returns `KC_STATUS_NUMERIC` when it exceeds the
// tolerance for that precision.
enum KcStatus kc_grad_check(uint32_t precision, uint64_t seed, double *max_relative_error);

// Library version string.
const char *kc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KAA_CAL_H */
