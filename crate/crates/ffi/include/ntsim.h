#ifndef NTSIM_H
#define NTSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NtsimStatus {
  NTSIM_STATUS_OK = 0,
  NTSIM_STATUS_NULL_ARGUMENT = 1,
  NTSIM_STATUS_INVALID_UTF8 = 2,
  NTSIM_STATUS_INVALID_CONFIG = 3,
  NTSIM_STATUS_ASSEMBLY_ERROR = 4,
  NTSIM_STATUS_IMAGE_ERROR = 5,
  NTSIM_STATUS_LOAD_ERROR = 6,
  NTSIM_STATUS_SIMULATION_ERROR = 7,
  NTSIM_STATUS_NOT_LOADED = 8,
  NTSIM_STATUS_INVALID_ARGUMENT = 9,
  NTSIM_STATUS_ATTACK_ERROR = 10,
  NTSIM_STATUS_PANIC = 11,
} NtsimStatus;

/*
 Simulator instance. Create with `ntsim_machine_new`.
 */
typedef struct NtsimMachine NtsimMachine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Static version string.
 */
const char *ntsim_version(void);

/*
 Message for the last failed call on this thread. Empty after a
 successful call. Valid until the next call on this thread.
 */
const char *ntsim_last_error(void);

/*
 # Safety
 `s` must come from this library or be null.
 */
void ntsim_string_free(char *s);

/*
 Create a machine. `config_json` may be null for the defaults.

 # Safety
 `config_json` must be null or a NUL-terminated string; `out` must be
 writable.
 */
enum NtsimStatus ntsim_machine_new(const char *config_json, struct NtsimMachine **out);

/*
 # Safety
 `m` must come from `ntsim_machine_new` or be null; it is invalid
 afterwards.
 */
void ntsim_machine_free(struct NtsimMachine *m);

/*
 Assemble `source` and load it, replacing any previous program.

 # Safety
 `m` must be a live handle and `source` a NUL-terminated string.
 */
enum NtsimStatus ntsim_machine_load_asm(struct NtsimMachine *m,
                                        const char *source,
                                        bool kernel,
                                        bool taint_aware);

/*
 Load a CTXB image, replacing any previous program.

 # Safety
 `m` must be a live handle and `bytes` must point to `len` readable bytes.
 */
enum NtsimStatus ntsim_machine_load_image(struct NtsimMachine *m,
                                          const uint8_t *bytes,
                                          size_t len,
                                          bool kernel,
                                          bool taint_aware);

/*
 Run at most `max_steps` steps (0 for no limit besides the cycle budget).
 `halted` receives whether the machine has stopped.

 # Safety
 `m` must be a live handle; `halted` must be writable or null.
 */
enum NtsimStatus ntsim_machine_run(struct NtsimMachine *m, uint64_t max_steps, bool *halted);

/*
 Run statistics as JSON.

 # Safety
 `m` must be a live handle; `out` must be writable.
 */
enum NtsimStatus ntsim_machine_stats_json(struct NtsimMachine *m, char **out);

/*
 Halt reason as JSON, or `null` while running.

 # Safety
 `m` must be a live handle; `out` must be writable.
 */
enum NtsimStatus ntsim_machine_halt_json(struct NtsimMachine *m, char **out);

/*
 Bytes the guest wrote to the host log, lossily decoded.

 # Safety
 `m` must be a live handle; `out` must be writable.
 */
enum NtsimStatus ntsim_machine_log(struct NtsimMachine *m, char **out);

/*
 Architectural value and taint of register `name` (`r0`, `sp`, `v3`, ...).

 # Safety
 `m` must be a live handle, `name` a NUL-terminated string; `value` and
 `tainted` must be writable or null.
 */
enum NtsimStatus ntsim_machine_reg(struct NtsimMachine *m,
                                   const char *name,
                                   uint64_t *value,
                                   bool *tainted);

/*
 Run an attack scenario and return its leak report as JSON.

 # Safety
 `variant` must be a NUL-terminated string, `config_json` null or one,
 `secret` must point to `secret_len` bytes, `out` must be writable.
 */
enum NtsimStatus ntsim_attack_json(const char *variant,
                                   const char *config_json,
                                   const uint8_t *secret,
                                   size_t secret_len,
                                   size_t rounds,
                                   char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NTSIM_H */
