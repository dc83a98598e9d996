/*
 * Host test harness for an emitted network.
 *
 *   harness <input.bin>
 *
 * Reads exactly NN_INPUT_LEN raw elements (host byte order), runs
 * nn_forward and prints one logit per line followed by "class=<k>".
 * Exit code 2 on a missing or wrongly sized input file.
 */
#include <stdio.h>

#include "network.h"

int main(int argc, char **argv)
{
    static nn_elem_t input[NN_INPUT_LEN];
    static nn_elem_t logits[NN_OUTPUT_LEN];
    FILE *f;
    size_t got;
    int extra;
    int k;
    int i;

    if (argc != 2) {
        fprintf(stderr, "usage: %s <input.bin>\n", argv[0]);
        return 2;
    }
    f = fopen(argv[1], "rb");
    if (f == NULL) {
        perror(argv[1]);
        return 2;
    }
    got = fread(input, 1, sizeof input, f);
    extra = fgetc(f);
    fclose(f);
    if (got != sizeof input || extra != EOF) {
        fprintf(stderr, "expected exactly %lu input bytes\n", (unsigned long)sizeof input);
        return 2;
    }

    k = nn_forward(input, logits);
    for (i = 0; i < NN_OUTPUT_LEN; ++i) {
#if NN_ELEM_IS_FLOAT
        printf("%.9g\n", (double)logits[i]);
#else
        printf("%d\n", (int)logits[i]);
#endif
    }
    printf("class=%d\n", k);
    return 0;
}
