#ifndef P2PVPN_H
#define P2PVPN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RvStatus {
  RV_STATUS_OK = 0,
  RV_STATUS_NULL_POINTER = 1,
  RV_STATUS_INVALID_ARGUMENT = 2,
  RV_STATUS_INVALID_UTF8 = 3,
  RV_STATUS_NOT_FOUND = 4,
  RV_STATUS_REJECTED = 5,
  RV_STATUS_PANIC = 6,
} RvStatus;

typedef struct RvGroupServer RvGroupServer;

/**
 * A stabilized overlay plus its node ids in join order.
 */
typedef struct RvOverlay RvOverlay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *rv_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void rv_string_free(char *s);

/**
 * Build and stabilize an `n`-node overlay on synthetic latencies.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RvStatus rv_overlay_new(size_t n, uint64_t seed, struct RvOverlay **out);

/**
 * # Safety
 * `h` must come from [`rv_overlay_new`] and not be freed twice.
 */
void rv_overlay_free(struct RvOverlay *h);

/**
 * Live nodes.
 *
 * # Safety
 * `h` and `out` must be valid.
 */
enum RvStatus rv_overlay_len(struct RvOverlay *h, size_t *out);

/**
 * One maintenance round.
 *
 * # Safety
 * `h` must be valid.
 */
enum RvStatus rv_overlay_tick(struct RvOverlay *h);

/**
 * Crash node `index` (join order) without notice.
 *
 * # Safety
 * `h` must be valid.
 */
enum RvStatus rv_overlay_kill(struct RvOverlay *h, size_t index);

/**
 * Greedy overlay hops from node `src` to node `dst`.
 *
 * # Safety
 * `h` and `hops` must be valid.
 */
enum RvStatus rv_overlay_route_hops(struct RvOverlay *h, size_t src, size_t dst, size_t *hops);

/**
 * Crawl the ring from its lowest id.
 *
 * # Safety
 * All pointers must be valid.
 */
enum RvStatus rv_overlay_crawl(struct RvOverlay *h, size_t *visited, size_t *inconsistent);

/**
 * Relay benchmark on a synthetic matrix of `hosts` rows; writes CSV.
 *
 * # Safety
 * `sizes` must point to `n_sizes` values; `csv_out` must be valid.
 */
enum RvStatus rv_relay_bench_csv(size_t hosts,
                                 const size_t *sizes,
                                 size_t n_sizes,
                                 size_t trials,
                                 uint64_t seed,
                                 char **csv_out);

/**
 * Full-tunnel sniffer capture. `approach` is 1 or 2.
 *
 * # Safety
 * `leak` and `csv_out` must be valid.
 */
enum RvStatus rv_tunnel_demo_csv(uint8_t approach,
                                 bool spoof_attack,
                                 uint64_t seed,
                                 bool *leak,
                                 char **csv_out);

/**
 * # Safety
 * `out` must be valid.
 */
enum RvStatus rv_group_server_new(uint64_t seed, struct RvGroupServer **out);

/**
 * # Safety
 * `h` must come from [`rv_group_server_new`] and not be freed twice.
 */
void rv_group_server_free(struct RvGroupServer *h);

/**
 * # Safety
 * All pointers must be valid NUL-terminated strings.
 */
enum RvStatus rv_group_create(struct RvGroupServer *h,
                              const char *admin,
                              const char *name,
                              const char *subnet);

/**
 * Run one line of the text protocol as `user` and return the reply.
 *
 * # Safety
 * `user` and `line` must be valid strings; `reply` must be valid.
 */
enum RvStatus rv_group_handle_line(struct RvGroupServer *h,
                                   const char *user,
                                   const char *line,
                                   char **reply);

/**
 * Revoke `user` in `group`; `revoked_nodes` receives how many certified
 * nodes were cut off.
 *
 * # Safety
 * String arguments must be valid; `revoked_nodes` may be null.
 */
enum RvStatus rv_group_revoke(struct RvGroupServer *h,
                              const char *group,
                              const char *user,
                              size_t *revoked_nodes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* P2PVPN_H */
