void use_len(char *dst) {
    dst[(unsigned)g_len] = 0;
}
