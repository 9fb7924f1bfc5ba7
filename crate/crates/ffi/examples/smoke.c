#include <stdio.h>
#include "mclkit.h"

int main(void) {
    struct MclLossConfig cfg = {0.2, 0.05, 2.5, 1.0, 1, 0, 0};
    struct MclValidity v;
    if (mcl_validate_hparams(cfg, 1024, 10, 4, 0.0, &v) != MCL_STATUS_OK) {
        fprintf(stderr, "%s\n", mcl_last_error_message());
        return 1;
    }
    printf("attraction_bound=%.8f overall_ok=%d\n", v.attraction_bound, v.overall_ok);

    double conf[] = {0.9, 0.8, 0.1, 0.85};
    unsigned char ind[] = {1, 1, 0, 0};
    struct MclMetrics m;
    if (mcl_metrics(conf, ind, 4, &m) != MCL_STATUS_OK) {
        fprintf(stderr, "%s\n", mcl_last_error_message());
        return 1;
    }
    printf("auroc=%.4f\n", m.auroc);
    return 0;
}
