class Config:
    # Hadamard transform
    BLOCK_SIZE = 16
    RANK = 8
    MAX_WALSH_ORDER = 10
    PAD_SHORT_AXES = True

    # Quantizers
    BITS_GX = 4
    BITS_GW = 8
    SUPPORTED_BITS = (4, 8)
    ROUNDING = "pseudo"  # "pseudo" (low mantissa bits) or "stochastic" (RngState)
    # g_x GEMMs scale g_y per row and w per column
    PER_ROW_GX = True
    PSEUDO_RANDOM_BITS = 11
    # integer GEMM overflow guards, keyed by operand bit-width
    MAX_INNER_EXTENT = {8: 10**6, 4: 10**7}

    # Precision warmup
    WARMUP_BITS = 8
    WARMUP_FRACTION = 1 / 8

    # ACBP container
    ACBP_MAGIC = b"ACBP"
    ACBP_VERSION = 1
    ACBP_MAX_BLOCK = 16

    # Cost model
    COST_OVERHEAD_OP_BITS = 32
    FP_BITS = 32

    # Dataset container
    DATASET_MAGIC = b"HLQD"
    DATASET_VERSION = 1

    # Runtime
    DEFAULT_OUT_DIR = "runs"
    DETERMINISTIC_ENV = "HLQ_DETERMINISTIC"
    THREAD_ENV_VARS = (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    )
