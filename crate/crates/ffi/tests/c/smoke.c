#include <stdio.h>
#include <string.h>
#include "p2pvpn.h"

#define CHECK(x) do { if ((x) != RV_STATUS_OK) { \
    fprintf(stderr, "%s failed: %s\n", #x, rv_last_error_message()); return 1; } } while (0)

int main(void) {
    RvOverlay *ov = NULL;
    size_t n = 0, visited = 0, bad = 0, hops = 0;
    CHECK(rv_overlay_new(32, 7, &ov));
    CHECK(rv_overlay_len(ov, &n));
    CHECK(rv_overlay_route_hops(ov, 0, 31, &hops));
    CHECK(rv_overlay_crawl(ov, &visited, &bad));
    if (n != 32 || visited != 32 || bad != 0) return 2;
    if (rv_overlay_kill(ov, 99) != RV_STATUS_INVALID_ARGUMENT) return 3;
    if (rv_last_error_message() == NULL) return 4;
    rv_overlay_free(ov);

    bool leak = true;
    char *csv = NULL;
    CHECK(rv_tunnel_demo_csv(2, true, 1, &leak, &csv));
    if (leak || strncmp(csv, "time_ms,", 8) != 0) return 5;
    rv_string_free(csv);
    printf("ok\n");
    return 0;
}
