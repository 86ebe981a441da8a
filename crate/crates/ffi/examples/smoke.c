/* cc -Iinclude examples/smoke.c -L../../target/release -lqoc_codesign_ffi -o smoke */
#include <stdio.h>
#include <stdlib.h>
#include "qoc_codesign.h"

int main(void) {
    QocSimulator *sim = NULL;
    if (qoc_simulator_from_preset("easy_x1", 0, 0, &sim) != QOC_STATUS_OK) {
        fprintf(stderr, "%s\n", qoc_last_error());
        return 1;
    }
    size_t n_seg = 20;
    size_t len = qoc_simulator_schedule_len(sim, n_seg);
    double *volts = calloc(len, sizeof(double));
    double *grad = calloc(len, sizeof(double));
    double cost = 0.0;
    QocStatus st = qoc_simulator_cost_grad(sim, volts, len, n_seg, &cost, grad);
    if (st != QOC_STATUS_OK) {
        fprintf(stderr, "%s\n", qoc_last_error());
        return 1;
    }
    printf("qoc %s: zero schedule cost %.6f, dC/dV[0] %.3e\n", qoc_version(), cost, grad[0]);
    free(volts);
    free(grad);
    qoc_simulator_free(sim);
    return 0;
}
