/* Load a checkpoint through the C ABI and score one cleaned answer vector.
 *
 *   cc -I include examples/score.c -L <target>/debug -lcdrisk_ffi -lpthread -ldl -lm
 *   ./a.out model.cdrp
 */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "cdrisk.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s model.cdrp\n", argv[0]);
        return 1;
    }
    CdrSchema *schema = NULL;
    if (cdr_schema_builtin(&schema) != CDR_STATUS_OK) {
        fprintf(stderr, "schema: %s\n", cdr_last_error_message());
        return 1;
    }
    CdrModel *model = NULL;
    CdrStatus st = cdr_model_load(argv[1], schema, &model);
    if (st != CDR_STATUS_OK) {
        fprintf(stderr, "load (%d): %s\n", (int)st, cdr_last_error_message());
        cdr_schema_free(schema);
        return 1;
    }

    size_t n = cdr_schema_feature_count(schema);
    double *values = malloc(n * sizeof(double));
    for (size_t i = 0; i < n; i++) values[i] = NAN;
    double risk = -1.0;
    st = cdr_model_risk_raw(model, schema, values, n, &risk);
    printf("empty sheet: status %d (%s)\n", (int)st, st == CDR_STATUS_REJECTED ? "rejected" : "unexpected");

    for (size_t i = 0; i < n; i++) values[i] = 1.0;
    st = cdr_model_risk_clean(model, values, n, &risk);
    if (st != CDR_STATUS_OK || risk < 0.0 || risk > 1.0) {
        fprintf(stderr, "score (%d): %s\n", (int)st, cdr_last_error_message());
        return 1;
    }
    printf("%s risk %.6f (cdrisk %s, %zu features, first %s)\n", cdr_model_disease(model), risk, cdr_version(),
           n, cdr_schema_feature_id(schema, 0));

    free(values);
    cdr_model_free(model);
    cdr_schema_free(schema);
    return 0;
}
