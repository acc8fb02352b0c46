#ifndef ECF_H
#define ECF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcfStatus {
  ECF_STATUS_OK = 0,
  ECF_STATUS_NULL_POINTER = 1,
  ECF_STATUS_INVALID_ARGUMENT = 2,
  ECF_STATUS_INVALID_SPEC = 3,
  // Undefined angle, zero scatter, degenerate interpolation and similar.
  ECF_STATUS_NUMERIC = 4,
  ECF_STATUS_DIVERGENCE = 5,
  ECF_STATUS_IO = 6,
  ECF_STATUS_BUFFER_TOO_SMALL = 7,
  ECF_STATUS_PANIC = 8,
} EcfStatus;

typedef enum EcfClosedForm {
  // Optimal classifier for original data.
  ECF_CLOSED_FORM_ORIGINAL = 0,
  // Optimal classifier for counterfactually augmented data.
  ECF_CLOSED_FORM_COUNTERFACTUAL = 1,
  // Classifier over causal features only.
  ECF_CLOSED_FORM_ROBUST = 2,
} EcfClosedForm;

// Weight vector with block views.
typedef struct EcfClassifier EcfClassifier;

// Trained encoder and classifier.
typedef struct EcfModel EcfModel;

// Feature law of the synthetic sentences.
typedef struct EcfSpec EcfSpec;

// Closed-form myopia numbers of a spec.
typedef struct EcfMyopia {
  double norm_e;
  double norm_u;
  double norm_r;
  double cos_ori;
  double cos_cad;
  // False when `lambda_star` and `cos_interp` are undefined (both NaN).
  bool has_lambda;
  double lambda_star;
  double cos_interp;
} EcfMyopia;

// Training settings; `d_repr = 0` means the input dimension.
typedef struct EcfTrainConfig {
  double alpha;
  double beta;
  double learning_rate;
  size_t epochs;
  size_t batch_pairs;
  uint64_t seed;
  size_t d_repr;
  bool identity_encoder;
} EcfTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Owned by the
// library; valid until the next failing call on the same thread.
const char *ecf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ecf_version(void);

// Built-in spec by name ("reference" or "hard").
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum EcfStatus ecf_spec_preset(const char *name, struct EcfSpec **out);

// Parses and validates a TOML spec.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum EcfStatus ecf_spec_from_toml(const char *text, struct EcfSpec **out);

// # Safety
// `spec` must come from this library or be NULL; it must not be used after.
void ecf_spec_free(struct EcfSpec *spec);

// Total feature dimension of `spec`.
//
// # Safety
// `spec` must be a live handle; `out` must be writable.
enum EcfStatus ecf_spec_dimension(const struct EcfSpec *spec, size_t *out);

// # Safety
// `spec` must be a live handle; `out` must be writable.
enum EcfStatus ecf_analyze(const struct EcfSpec *spec, struct EcfMyopia *out);

// # Safety
// `spec` must be a live handle; `out` must be writable.
enum EcfStatus ecf_closed_form(const struct EcfSpec *spec,
                               enum EcfClosedForm kind,
                               struct EcfClassifier **out);

// Classifier with the block layout of `spec` and the given weights.
//
// # Safety
// `weights` must point to `len` doubles; `out` must be writable.
enum EcfStatus ecf_classifier_new(const struct EcfSpec *spec,
                                  const double *weights,
                                  size_t len,
                                  struct EcfClassifier **out);

// # Safety
// `classifier` must come from this library or be NULL.
void ecf_classifier_free(struct EcfClassifier *classifier);

// Copies the weights into `buf`. `*written` receives the weight count;
// when `cap` is too small nothing is copied and `ECF_STATUS_BUFFER_TOO_SMALL`
// is returned, so a NULL/0 call queries the length.
//
// # Safety
// `buf` must hold `cap` doubles; `written` must be writable.
enum EcfStatus ecf_classifier_weights(const struct EcfClassifier *classifier,
                                      double *buf,
                                      size_t cap,
                                      size_t *written);

// Cosine similarity between the classifier and the robust classifier of
// `spec`.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EcfStatus ecf_cosine_to_robust(const struct EcfClassifier *classifier,
                                    const struct EcfSpec *spec,
                                    double *out);

// Default training settings.
//
// # Safety
// `out` must be writable.
enum EcfStatus ecf_train_config_default(struct EcfTrainConfig *out);

// Samples `n_pairs` counterfactual pairs from `spec` with `data_seed` and
// trains a model on them.
//
// # Safety
// Pointers must be live; `out` must be writable.
enum EcfStatus ecf_train(const struct EcfSpec *spec,
                         const struct EcfTrainConfig *config,
                         size_t n_pairs,
                         double alignment_noise_sd,
                         uint64_t data_seed,
                         struct EcfModel **out);

// # Safety
// `model` must come from this library or be NULL.
void ecf_model_free(struct EcfModel *model);

// `[p(negative), p(positive)]` for one feature vector.
//
// # Safety
// `features` must point to `len` doubles and `out` to 2 writable doubles.
enum EcfStatus ecf_model_predict_proba(const struct EcfModel *model,
                                       const double *features,
                                       size_t len,
                                       double *out);

// The model's effective decision vector over the input features.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EcfStatus ecf_model_decision(const struct EcfModel *model,
                                  const struct EcfSpec *spec,
                                  struct EcfClassifier **out);

// Model as a JSON string; release it with [`ecf_string_free`].
//
// # Safety
// `model` must be live; `out` must be writable.
enum EcfStatus ecf_model_to_json(const struct EcfModel *model, char **out);

// # Safety
// `s` must come from this library or be NULL.
void ecf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECF_H */
