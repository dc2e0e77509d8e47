#include <stdio.h>
#include "mpl.h"

int main(void) {
    if (mpl_abi_version() != MPL_ABI_VERSION) return 10;
    MplEnv *env = NULL;
    if (mpl_env_new(NULL, 7, &env) != MPL_STATUS_OK) return 11;
    MplEnvStatus status = MPL_ENV_STATUS_RUNNING;
    bool collided = false;
    double u[2];
    int steps = 0;
    while (status == MPL_ENV_STATUS_RUNNING) {
        mpl_env_nominal_input(env, u);
        if (mpl_env_step(env, u[0], u[1], &status, &collided) != MPL_STATUS_OK) return 12;
        steps++;
    }
    if (mpl_env_step(env, 0.0, 0.0, NULL, NULL) != MPL_STATUS_NOT_RUNNING) return 13;
    mpl_env_free(env);

    MplModel *model = NULL;
    if (mpl_model_load("/nonexistent/model.bin", &model) != MPL_STATUS_IO) return 14;
    if (model != NULL || mpl_last_error()[0] == '\0') return 15;
    printf("%d\n", steps);
    return 0;
}
