#ifndef DUALSCREEN_H
#define DUALSCREEN_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_CONFIG = 3,
  DS_STATUS_IO = 4,
  DS_STATUS_CHECKPOINT = 5,
  DS_STATUS_SHAPE = 6,
  DS_STATUS_DATA = 7,
  DS_STATUS_NUMERIC = 8,
  DS_STATUS_BUFFER_TOO_SMALL = 9,
  DS_STATUS_PANIC = 10,
} DsStatus;

/**
 * A trained crop classifier.
 */
typedef struct DsClassifier DsClassifier;

/**
 * A trained object detector.
 */
typedef struct DsDetector DsDetector;

typedef struct DsScreenConfig {
  double score_threshold;
  double nms_threshold;
  /**
   * Detections scoring below this are not classified.
   */
  double screening_threshold;
  /**
   * Fraction of the box size added on every side before cropping.
   */
  double pad_fraction;
} DsScreenConfig;

/**
 * One detected object. Box corners are in pixels, `x_max`/`y_max` exclusive.
 */
typedef struct DsDetection {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  /**
   * Index into the class list, see `ds_class_name`.
   */
  uint32_t class_id;
  double score;
} DsDetection;

/**
 * A detection together with the classifier's verdict on its crop.
 */
typedef struct DsScreenedDetection {
  struct DsDetection detection;
  bool anomalous;
  /**
   * Probability of the anomalous class.
   */
  double anomaly_score;
} DsScreenedDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on the calling thread, or NULL if
 * nothing has failed yet. The pointer stays valid until the next failing call
 * on this thread.
 */
const char *ds_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ds_version(void);

/**
 * Number of object classes the detector knows.
 */
uint32_t ds_class_count(void);

/**
 * Static name of class `class_id`, or NULL when out of range.
 */
const char *ds_class_name(uint32_t class_id);

/**
 * Default thresholds of the screening pipeline.
 */
struct DsScreenConfig ds_screen_config_default(void);

/**
 * Loads a detector checkpoint. On success `*out` receives a handle that must
 * be released with `ds_detector_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_detector_load(const char *path, struct DsDetector **out);

/**
 * Releases a detector. NULL is ignored.
 *
 * # Safety
 * `detector` must come from `ds_detector_load` and not be freed twice.
 */
void ds_detector_free(struct DsDetector *detector);

/**
 * Detects objects in an RGB8 image. Detections come out in descending score
 * order. `*count` receives the total number found; when it exceeds
 * `capacity`, the first `capacity` are written and `DS_STATUS_BUFFER_TOO_SMALL`
 * is returned.
 *
 * # Safety
 * `pixels` must hold `height * width * 3` bytes, `out` room for `capacity`
 * detections (may be NULL when `capacity` is 0) and `count` must be valid.
 */
enum DsStatus ds_detector_detect(const struct DsDetector *detector,
                                 const uint8_t *pixels,
                                 uint32_t width,
                                 uint32_t height,
                                 double score_threshold,
                                 double nms_threshold,
                                 struct DsDetection *out,
                                 size_t capacity,
                                 size_t *count);

/**
 * Loads a classifier checkpoint. On success `*out` receives a handle that
 * must be released with `ds_classifier_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsStatus ds_classifier_load(const char *path, struct DsClassifier **out);

/**
 * Releases a classifier. NULL is ignored.
 *
 * # Safety
 * `classifier` must come from `ds_classifier_load` and not be freed twice.
 */
void ds_classifier_free(struct DsClassifier *classifier);

/**
 * Patch size the classifier expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DsStatus ds_classifier_input_size(const struct DsClassifier *classifier,
                                       uint32_t *width,
                                       uint32_t *height);

/**
 * Classifies one RGB8 patch of exactly the classifier's input size.
 *
 * # Safety
 * `pixels` must hold `height * width * 3` bytes; the output pointers must be
 * valid.
 */
enum DsStatus ds_classifier_classify(const struct DsClassifier *classifier,
                                     const uint8_t *pixels,
                                     uint32_t width,
                                     uint32_t height,
                                     bool *anomalous,
                                     double *anomaly_score);

/**
 * Full two-stage screening of one RGB8 image: detect, crop every detection
 * scoring at least `screening_threshold`, classify the crop. Only screened
 * detections are reported. `config` may be NULL for the defaults. Output
 * buffer semantics match `ds_detector_detect`.
 *
 * # Safety
 * As for `ds_detector_detect`; `classifier` must be a valid handle and
 * `config` NULL or valid.
 */
enum DsStatus ds_screen(const struct DsDetector *detector,
                        const struct DsClassifier *classifier,
                        const uint8_t *pixels,
                        uint32_t width,
                        uint32_t height,
                        const struct DsScreenConfig *config,
                        struct DsScreenedDetection *out,
                        size_t capacity,
                        size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALSCREEN_H */
