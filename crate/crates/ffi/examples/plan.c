/* Plans one braking step with the exact bicycle model. */
#include <stdio.h>

#include "mpic.h"

int main(void) {
    MpicModel *model = NULL;
    MpicScenario *scenario = NULL;
    MpicController *ctrl = NULL;
    double x[4] = {0.0, -1.8, 0.0, 20.0};
    double u_prev[2] = {0.0, 0.0};
    double u[2];
    int rc = 1;

    if (mpic_model_bicycle(0.1, 2.7, &model) != MPIC_STATUS_OK ||
        mpic_scenario_fixture("braking", &scenario) != MPIC_STATUS_OK ||
        mpic_controller_new(model, scenario, "{\"particles\": 4}", &ctrl) != MPIC_STATUS_OK ||
        mpic_controller_plan(ctrl, 0, x, u_prev, u) != MPIC_STATUS_OK) {
        fprintf(stderr, "error: %s\n", mpic_last_error());
        goto done;
    }
    if (mpic_scenario_fixture("nowhere", &scenario) != MPIC_STATUS_INVALID_ARGUMENT) {
        goto done;
    }
    printf("a=%.6f delta=%.6f\n", u[0], u[1]);
    rc = 0;
done:
    mpic_controller_free(ctrl);
    mpic_scenario_free(scenario);
    mpic_model_free(model);
    return rc;
}
