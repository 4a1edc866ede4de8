int read_len(FILE *f) {
    int buf;
    long n = fread(&buf, 4, 1, f);
    g_len = buf;
    return buf;
}
