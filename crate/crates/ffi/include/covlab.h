#ifndef COVLAB_H
#define COVLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CovlabStatus {
  COVLAB_STATUS_OK = 0,
  // Bad arguments, unparsable specs or configs.
  COVLAB_STATUS_INVALID_INPUT = 1,
  // A numerical invariant failed.
  COVLAB_STATUS_ASSERTION = 2,
  // A required pointer was null.
  COVLAB_STATUS_NULL_POINTER = 3,
  COVLAB_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  COVLAB_STATUS_PANIC = 5,
} CovlabStatus;

// Graph domain handle.
typedef struct CovlabDomain CovlabDomain;

// Green function handle.
typedef struct CovlabGreen CovlabGreen;

// Uniform grid of a Green solve: node `(i, j)` at `(x0 + i h, t0 + j h)`.
typedef struct CovlabGrid {
  double x0;
  double t0;
  double h;
  uint32_t nx;
  uint32_t nt;
} CovlabGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. Owned by the
// library; valid until the next failing call on this thread.
const char *covlab_last_error(void);

// Library version as a static NUL-terminated string.
const char *covlab_version(void);

// Builds a domain from a spec such as `"cone:1"` or `"sine:0.3,2"`.
//
// # Safety
// `spec` must be a NUL-terminated string and `out` a valid pointer.
enum CovlabStatus covlab_domain_new(const char *spec,
                                    double r,
                                    uint32_t grid_n,
                                    struct CovlabDomain **out);

// # Safety
// `dom` must come from [`covlab_domain_new`] and not be used afterwards.
void covlab_domain_free(struct CovlabDomain *dom);

// Graph height `g(x)`.
//
// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_domain_g(const struct CovlabDomain *dom, double x, double *out);

// Distance from `(x, t)` to the boundary; fails below the graph.
//
// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_domain_dist(const struct CovlabDomain *dom,
                                     double x,
                                     double t,
                                     double *out);

// Green function with pole at infinity, normalized to 1 at `(0, g(0) + 1)`.
//
// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_green_solve(const struct CovlabDomain *dom,
                                     uint32_t grid_n,
                                     struct CovlabGreen **out);

// # Safety
// `g` must come from [`covlab_green_solve`] and not be used afterwards.
void covlab_green_free(struct CovlabGreen *g);

// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_green_grid(const struct CovlabGreen *g, struct CovlabGrid *out);

// Bilinear value of `G` at `(x, t)`.
//
// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_green_value(const struct CovlabGreen *g, double x, double t, double *out);

// Copies the `nx·nt` node values of `G` into `buf` (row `j` at `j·nx`),
// NaN at nodes without a value.
//
// # Safety
// `buf` must hold `len` doubles.
enum CovlabStatus covlab_green_values(const struct CovlabGreen *g, double *buf, size_t len);

// Reverse-Hölder constant `C_p` of the density `κ` over boundary balls of
// radius `radius` centred at `0, ±R/8, ±R/4`.
//
// # Safety
// Pointers must be valid.
enum CovlabStatus covlab_rh_constant(const struct CovlabGreen *g,
                                     double p,
                                     double radius,
                                     double *out);

// Runs the base-versus-perturbed experiment for each ε of a scenario
// (JSON, the same schema as the command line) and returns the reports as
// a JSON array. `map` overrides the scenario's map when non-null.
//
// # Safety
// `config` must be NUL-terminated, `map` null or NUL-terminated, `out` valid.
enum CovlabStatus covlab_pipeline_json(const char *config, const char *map, char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void covlab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVLAB_H */
