/* C API for the metaseld core library.
 *
 * All functions return a status code: 0 success, 2 configuration error,
 * 3 data/IO error, 4 numerical failure. On failure mseld_last_error()
 * returns a thread-local message describing what went wrong.
 */
#ifndef METASELD_C_H
#define METASELD_C_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define MSELD_OK 0
#define MSELD_ERR_CONFIG 2
#define MSELD_ERR_DATA 3
#define MSELD_ERR_NUMERIC 4

/* Opaque run configuration (key = value pairs with section prefixes). */
typedef struct mseld_config mseld_config;

mseld_config* mseld_config_create(void);
void mseld_config_destroy(mseld_config* cfg);

/* Loads a config file (line-oriented `key = value` under [section] headers),
 * overriding current values. */
int mseld_config_load(mseld_config* cfg, const char* path);

/* Sets one "section.key" to a string value. Unknown keys are errors. */
int mseld_config_set(mseld_config* cfg, const char* key, const char* value);

/* Copies the value of "section.key" into buf (NUL-terminated, truncated to
 * buflen). */
int mseld_config_get(const mseld_config* cfg, const char* key, char* buf, size_t buflen);

/* Pipeline commands; paths and hyperparameters come from the config. */
int mseld_synth_data(const mseld_config* cfg);
int mseld_extract_features(const mseld_config* cfg, long* written, long* skipped);
int mseld_run(const mseld_config* cfg);
int mseld_evaluate(const mseld_config* cfg, const char* refs_dir, const char* preds_dir,
                   const char* manifest_csv, const char* out_csv);
int mseld_report(const char* const* run_dirs, size_t n_runs, const char* out_dir);

/* Thread-local message for the most recent failure. */
const char* mseld_last_error(void);

const char* mseld_version(void);

#ifdef __cplusplus
}
#endif

#endif /* METASELD_C_H */
