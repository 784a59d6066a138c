import os

# Every matrix in this package is small; multi-threaded BLAS only adds
# synchronization overhead (measured ~8x slowdown on 2-core hosts).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
