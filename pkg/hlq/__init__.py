"""Hadamard low-rank quantized backpropagation (HLQ) training library."""
import os

from config.settings import Config

# Thread pinning has to happen before numpy loads its BLAS.
if os.environ.get(Config.DETERMINISTIC_ENV) == "1":
    for _var in Config.THREAD_ENV_VARS:
        os.environ[_var] = "1"

__version__ = "0.1.0"


def deterministic_mode():
    return os.environ.get(Config.DETERMINISTIC_ENV) == "1"
