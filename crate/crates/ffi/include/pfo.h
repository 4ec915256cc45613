#ifndef PFO_H
#define PFO_H

#include <stdbool.h>
#include <stdint.h>

/**
 * Result of every call.
 */
typedef enum pfo_status_t {
  PFO_STATUS_T_OK = 0,
  PFO_STATUS_T_NULL_ARGUMENT = 1,
  PFO_STATUS_T_INVALID_UTF8 = 2,
  /**
   * Syntax, semantic or unsupported-construct error in the program.
   */
  PFO_STATUS_T_PROGRAM = 3,
  /**
   * Bad inputs, options or domain.
   */
  PFO_STATUS_T_INPUT = 4,
  /**
   * No valid staging plan or layout.
   */
  PFO_STATUS_T_PLAN = 5,
  /**
   * The program traps or exceeds its step limit.
   */
  PFO_STATUS_T_RUNTIME = 6,
  PFO_STATUS_T_INTERNAL = 7,
  PFO_STATUS_T_PANIC = 8,
} pfo_status_t;

/**
 * A compiled program: vanilla build plus its transformed plan.
 */
typedef struct pfo_program_t pfo_program_t;

/**
 * Copy operations the plan performs.
 */
typedef struct pfo_copy_counts_t {
  uint64_t code_fetch;
  uint64_t data_fetch;
  uint64_t copy_back;
} pfo_copy_counts_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *pfo_last_error(void);

/**
 * Compiles `source` with passes `opts` (`"O1,O2"`, `"all"` or `""`).
 *
 * # Safety
 * `source` and `opts` must be valid nul-terminated strings; `out` must be
 * a valid pointer. On success `*out` owns a handle to release with
 * [`pfo_program_free`].
 */
enum pfo_status_t pfo_compile(const char *source,
                              const char *opts,
                              uint64_t page_size,
                              struct pfo_program_t **out);

/**
 * # Safety
 * `p` must be null or a handle from [`pfo_compile`] not yet freed.
 */
void pfo_program_free(struct pfo_program_t *p);

/**
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum pfo_status_t pfo_copy_counts(const struct pfo_program_t *p, struct pfo_copy_counts_t *out);

/**
 * Runs one input, given as a JSON object of name to element list, on the
 * vanilla or transformed program. `*out_json` receives the result as JSON;
 * release it with [`pfo_string_free`].
 *
 * # Safety
 * `p` must be a live handle, `inputs_json` a valid nul-terminated string
 * and `out_json` a valid pointer.
 */
enum pfo_status_t pfo_simulate(const struct pfo_program_t *p,
                               const char *inputs_json,
                               bool transformed,
                               char **out_json);

/**
 * Checks the profile is the same for every value of the low `bits` secret
 * bits. `*oblivious` is set to 1 or 0.
 *
 * # Safety
 * `p` must be a live handle and `oblivious` a valid pointer.
 */
enum pfo_status_t pfo_verify(const struct pfo_program_t *p,
                             uint32_t bits,
                             bool transformed,
                             int32_t *oblivious);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void pfo_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PFO_H */
