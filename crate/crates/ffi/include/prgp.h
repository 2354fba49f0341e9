/* C interface of the prgp traffic state estimation toolkit. */

#ifndef PRGP_H
#define PRGP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Flow unit of a detector file column.
 */
typedef enum PrgpFlowUnit {
  PRGP_FLOW_UNIT_VEH_PER_HOUR = 0,
  PRGP_FLOW_UNIT_VEH_PER_FIVE_MINUTES = 1,
} PrgpFlowUnit;

/**
 * Speed unit of a detector file column.
 */
typedef enum PrgpSpeedUnit {
  PRGP_SPEED_UNIT_KM_PER_HOUR = 0,
  PRGP_SPEED_UNIT_MILES_PER_HOUR = 1,
} PrgpSpeedUnit;

/**
 * Status code of every fallible call. Anything but `Ok` leaves a
 * description in the per-thread buffer read by [`prgp_last_error`].
 */
typedef enum PrgpStatus {
  PRGP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PRGP_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PRGP_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument value was out of range.
   */
  PRGP_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Detector text could not be parsed.
   */
  PRGP_STATUS_PARSE_FAILED = 4,
  /**
   * Training failed to produce a model.
   */
  PRGP_STATUS_TRAIN_FAILED = 5,
  /**
   * Prediction or evaluation failed.
   */
  PRGP_STATUS_PREDICT_FAILED = 6,
  /**
   * A file could not be read or written.
   */
  PRGP_STATUS_IO_FAILED = 7,
  /**
   * The call panicked; the handle state is unspecified.
   */
  PRGP_STATUS_PANICKED = 8,
} PrgpStatus;

/**
 * Opaque detector dataset handle. Rows are stored in internal units.
 */
typedef struct PrgpDataset PrgpDataset;

/**
 * Opaque trained-model handle.
 */
typedef struct PrgpModel PrgpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message of this thread into `buf` (NUL
 * terminated, truncated to `cap` bytes) and returns the full message length
 * in bytes, excluding the terminator. Returns 0 when no error is recorded.
 * Passing a null or empty buffer just reports the required length.
 */
size_t prgp_last_error(char *buf, size_t cap);

/**
 * Parses detector CSV text (`segment,k,flow,speed` header) given the units
 * of its value columns. On success stores a new dataset handle in `out`.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum PrgpStatus prgp_dataset_parse(const char *text,
                                   enum PrgpFlowUnit flow_unit,
                                   enum PrgpSpeedUnit speed_unit,
                                   struct PrgpDataset **out);

/**
 * Reads and parses a detector CSV file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum PrgpStatus prgp_dataset_read(const char *path,
                                  enum PrgpFlowUnit flow_unit,
                                  enum PrgpSpeedUnit speed_unit,
                                  struct PrgpDataset **out);

/**
 * Number of rows in a dataset; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be a live handle from this library or null.
 */
size_t prgp_dataset_len(const struct PrgpDataset *dataset);

/**
 * Reads one row. Missing values are reported as NaN. Flow is in veh/h,
 * speed in km/h.
 *
 * # Safety
 * `dataset` must be a live handle; the out pointers must be valid.
 */
enum PrgpStatus prgp_dataset_row(const struct PrgpDataset *dataset,
                                 size_t index,
                                 size_t *segment,
                                 size_t *step,
                                 double *flow,
                                 double *speed);

/**
 * Renders a dataset as detector CSV text in the requested units. The
 * returned string must be released with [`prgp_string_free`].
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be a valid pointer.
 */
enum PrgpStatus prgp_dataset_render(const struct PrgpDataset *dataset,
                                    enum PrgpFlowUnit flow_unit,
                                    enum PrgpSpeedUnit speed_unit,
                                    char **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must be a handle from this library that has not been freed.
 */
void prgp_dataset_free(struct PrgpDataset *dataset);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `text` must be a string returned by this library that has not been freed.
 */
void prgp_string_free(char *text);

/**
 * Trains a model on a dataset and stores the handle in `out`.
 *
 * `use_physics` of 0 fits GP hyperparameters alone; nonzero also ascends
 * the physics regularizer. `data_interval_hours` is the time spacing of
 * consecutive `k` indices (0 selects five-minute data), `lanes` the lane
 * count of the corridor (0 selects 4). `iterations`, `batch`,
 * `learning_rate`, and `step_size` of 0 select the defaults (500, 10,
 * 0.01, 0.01).
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be a valid pointer.
 */
enum PrgpStatus prgp_train(const struct PrgpDataset *dataset,
                           int32_t use_physics,
                           uint32_t iterations,
                           uint32_t batch,
                           double learning_rate,
                           double step_size,
                           double data_interval_hours,
                           double lanes,
                           uint64_t seed,
                           struct PrgpModel **out);

/**
 * Saves a model checkpoint to a file.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid NUL-terminated string.
 */
enum PrgpStatus prgp_model_save(const struct PrgpModel *model, const char *path);

/**
 * Loads a model checkpoint from a file and stores the handle in `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum PrgpStatus prgp_model_load(const char *path, struct PrgpModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be a handle from this library that has not been freed.
 */
void prgp_model_free(struct PrgpModel *model);

/**
 * Predicts flow (veh/h) and speed (km/h) at `count` grid cells given by
 * parallel `segments`/`steps` arrays, conditioning the trained model on
 * `train_data`. Results are written to the caller's `out_flow` and
 * `out_speed` buffers, each with room for `count` values.
 *
 * # Safety
 * All handles must be live; the four array pointers must address `count`
 * readable (respectively writable) elements.
 */
enum PrgpStatus prgp_predict(const struct PrgpModel *model,
                             const struct PrgpDataset *train_data,
                             const size_t *segments,
                             const size_t *steps,
                             size_t count,
                             double *out_flow,
                             double *out_speed);

/**
 * Scores an estimate dataset against a truth dataset on their shared cells:
 * RMSE and MAPE (percent) per dimension. A dimension with no scorable cells
 * reports NaN for both.
 *
 * # Safety
 * Both handles must be live; the out pointers must be valid.
 */
enum PrgpStatus prgp_evaluate(const struct PrgpDataset *truth,
                              const struct PrgpDataset *estimate,
                              double *flow_rmse,
                              double *flow_mape,
                              double *speed_rmse,
                              double *speed_mape);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRGP_H */
