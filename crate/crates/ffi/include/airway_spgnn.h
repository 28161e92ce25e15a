#ifndef AIRWAY_SPGNN_H
#define AIRWAY_SPGNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpgnnStatus {
  SPGNN_STATUS_OK = 0,
  SPGNN_STATUS_NULL_ARGUMENT = 1,
  SPGNN_STATUS_INVALID_ARGUMENT = 2,
  SPGNN_STATUS_IO = 3,
  SPGNN_STATUS_FORMAT = 4,
  SPGNN_STATUS_SHAPE = 5,
  SPGNN_STATUS_INTERNAL = 6,
} SpgnnStatus;

// Trained CNN with an optional graph network.
typedef struct SpgnnLabeler SpgnnLabeler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *spgnn_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on this thread.
const char *spgnn_last_error(void);

// Loads a CNN checkpoint and, when `gnn_path` is non-null, a graph-network
// checkpoint. On success `*out` owns a handle for [`spgnn_labeler_free`].
//
// # Safety
// Paths must be null or NUL-terminated; `out` must be writable.
enum SpgnnStatus spgnn_labeler_load(const char *cnn_path,
                                    const char *gnn_path,
                                    struct SpgnnLabeler **out);

// # Safety
// `h` must be null or a handle from [`spgnn_labeler_load`] not yet freed.
void spgnn_labeler_free(struct SpgnnLabeler *h);

// Labels the tree in a MetaImage label volume. The branch graph is read
// from `graph_path` when non-null, otherwise built from the volume. On
// success `*out_json` receives the assignment document.
//
// # Safety
// `h` must be a live handle; paths null or NUL-terminated; `out_json` writable.
enum SpgnnStatus spgnn_label_volume(const struct SpgnnLabeler *h,
                                    const char *volume_path,
                                    const char *graph_path,
                                    char **out_json);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void spgnn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIRWAY_SPGNN_H */
