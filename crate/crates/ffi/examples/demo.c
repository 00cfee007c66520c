/*
 * Minimal C consumer of the syllabel C ABI.
 *
 * Build (from the workspace root, after `cargo build -p syllabel-ffi`):
 *
 *   gcc crates/ffi/examples/demo.c \
 *       -Icrates/ffi/include -Ltarget/debug -lsyllabel_ffi -o demo
 *   LD_LIBRARY_PATH=target/debug ./demo model.ckpt takta
 */
#include "syllabel.h"

#include <stdio.h>

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s <checkpoint> <phones>\n", argv[0]);
        return 1;
    }
    printf("syllabel %s\n", syllabel_version());

    SyllabelModel *model = NULL;
    if (syllabel_model_load(argv[1], &model) != SYLLABEL_STATUS_OK) {
        fprintf(stderr, "load failed: %s\n", syllabel_last_error_message());
        return 1;
    }
    printf("vocabulary size: %zu\n", syllabel_model_vocab_size(model));

    char *text = NULL;
    SyllabelStatus status = syllabel_syllabify(model, argv[2], &text);
    if (status == SYLLABEL_STATUS_OK) {
        printf("%s -> %s\n", argv[2], text);
        syllabel_string_free(text);
    } else {
        fprintf(stderr, "syllabify failed with status %d\n", (int)status);
    }

    syllabel_model_free(model);
    return status == SYLLABEL_STATUS_OK ? 0 : 1;
}
