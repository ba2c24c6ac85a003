#ifndef VOXELSEG_VOXELSEG_H
#define VOXELSEG_VOXELSEG_H

#include <stddef.h>

#if defined(_WIN32)
#if defined(VXS_BUILDING)
#define VXS_API __declspec(dllexport)
#else
#define VXS_API __declspec(dllimport)
#endif
#else
#define VXS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. VXS_OK is 0; every failing call also sets a thread-local
 * message readable through vxs_last_error(). */
typedef enum vxs_status {
  VXS_OK = 0,
  VXS_ERR_INVALID_ARGUMENT = 1,
  VXS_ERR_CONFIG = 2,
  VXS_ERR_IO = 3,
  VXS_ERR_PARSE = 4,
  VXS_ERR_MISSING_MODALITY = 5,
  VXS_ERR_SHAPE_MISMATCH = 6,
  VXS_ERR_INVALID_LABEL = 7,
  VXS_ERR_EMPTY_BRAIN_MASK = 8,
  VXS_ERR_DEGENERATE_INTENSITY = 9,
  VXS_ERR_RANGE = 10,
  VXS_ERR_NON_FINITE_GRADIENT = 11,
  VXS_ERR_CHECKPOINT = 12,
  VXS_ERR_EMPTY_MASK = 13,
  VXS_ERR_EMPTY_REGION = 14,
  VXS_ERR_DEGENERATE_GLCM = 15,
  VXS_ERR_EMPTY_DATASET = 16,
  VXS_ERR_DIMENSION_MISMATCH = 17,
  VXS_ERR_SPEC = 18,
  VXS_ERR_INTERNAL = 99
} vxs_status;

VXS_API const char* vxs_version(void);

/* Message of the last failing call on this thread; "" when none. */
VXS_API const char* vxs_last_error(void);

/* Symbolic name of a status, e.g. "ConfigError". */
VXS_API const char* vxs_status_name(vxs_status status);

/* Process exit code for a status: 0 ok, 2 config, 3 data, 4 numeric, 5 I/O. */
VXS_API int vxs_exit_code(vxs_status status);

/* Worker threads for subsequent calls (results do not depend on it). */
VXS_API vxs_status vxs_set_threads(int n);

/* NULL-terminated list of command names accepted by vxs_run_create. */
VXS_API const char* const* vxs_commands(void);

/* ---- runs ----------------------------------------------------------------
 * A run is one command invocation: a JSON config plus dotted-path overrides.
 * Nothing touches the filesystem until vxs_run_execute, which validates the
 * full config first and writes <out_dir>/manifest.json on success. */
typedef struct vxs_run vxs_run;

VXS_API vxs_status vxs_run_create(const char* command, vxs_run** out);
VXS_API void vxs_run_free(vxs_run* run);

/* Replaces the config with the JSON object in config_json. */
VXS_API vxs_status vxs_run_set_config(vxs_run* run, const char* config_json);
VXS_API vxs_status vxs_run_load_config(vxs_run* run, const char* path);

/* Override one field; value_json is any JSON value ("3", "\"desk\"",
 * "[1,2]"). Later overrides of the same path win. */
VXS_API vxs_status vxs_run_override(vxs_run* run, const char* dotted_path, const char* value_json);

/* Same, with value taken as a plain string. */
VXS_API vxs_status vxs_run_override_string(vxs_run* run, const char* dotted_path, const char* value);

VXS_API vxs_status vxs_run_execute(vxs_run* run);

/* Manifest JSON of the last successful execute; NULL before. Owned by run. */
VXS_API const char* vxs_run_manifest(const vxs_run* run);

/* ---- survival models ------------------------------------------------------- */
typedef struct vxs_survival_model vxs_survival_model;

VXS_API vxs_status vxs_survival_model_load(const char* json_path, vxs_survival_model** out);
VXS_API void vxs_survival_model_free(vxs_survival_model* model);
VXS_API size_t vxs_survival_model_num_features(const vxs_survival_model* model);
/* Name of feature i, or NULL when out of range. Owned by model. */
VXS_API const char* vxs_survival_model_feature_name(const vxs_survival_model* model, size_t i);

/* Combined prediction in days for one row of n_features values. */
VXS_API vxs_status vxs_survival_model_predict(const vxs_survival_model* model, const double* features,
                                              size_t n_features, double* out_days);

/* ---- segmentation models ----------------------------------------------------- */
typedef struct vxs_seg_model vxs_seg_model;

/* Loads an ensemble of n checkpoint manifests (averaged at prediction). */
VXS_API vxs_status vxs_seg_model_load(const char* const* checkpoint_paths, size_t n, vxs_seg_model** out);
VXS_API void vxs_seg_model_free(vxs_seg_model* model);

/* Segments one preprocessed case directory and writes <out_dir>/seg.json. */
VXS_API vxs_status vxs_seg_model_predict_case(const vxs_seg_model* model, const char* case_dir, const char* out_dir);

/* Raw forward pass. input is [4, d, h, w] float32 (d, h, w any size); the
 * result is the [4, d, h, w] softmax in class order (0, 1, 2, 4). */
VXS_API vxs_status vxs_seg_model_softmax(const vxs_seg_model* model, const float* input, size_t d, size_t h, size_t w,
                                         float* out_softmax);

#ifdef __cplusplus
}
#endif

#endif
