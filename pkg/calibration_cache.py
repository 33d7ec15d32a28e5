import logging
from threading import Lock

from hlq.errors.handlers import StateError


class CalibrationCache:
    """Per-layer basis selections, written during calibration and frozen for the rest of a run."""

    _logger = logging.getLogger(__name__)

    def __init__(self, block_size):
        self.block_size = block_size
        self.bases = {}  # layer name -> sorted basis indices
        self.frozen = False
        self.lock = Lock()

    def __enter__(self):
        """Thread-safe entry point."""
        self.lock.acquire()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Thread-safe exit point."""
        assert self.lock.locked()
        self.lock.release()

    def needs_calibration(self, layer_name) -> bool:
        assert self.lock.locked()
        return not self.frozen and layer_name not in self.bases

    def update(self, layer_name, basis_indices):
        """Record the bases chosen for one layer; each layer is written once."""
        assert self.lock.locked()
        if self.frozen:
            raise StateError(f"calibration is frozen; cannot change bases of {layer_name}")
        if layer_name in self.bases:
            raise StateError(f"bases of {layer_name} are already calibrated")
        indices = tuple(sorted(int(i) for i in basis_indices))
        if any(not 0 <= i < self.block_size for i in indices):
            raise StateError(f"basis index outside [0, {self.block_size}) for {layer_name}: {indices}")
        self.bases[layer_name] = indices
        CalibrationCache._logger.debug("calibrated %s: bases %s", layer_name, indices)

    def freeze(self):
        assert self.lock.locked()
        self.frozen = True

    def get_bases(self):
        assert self.lock.locked()
        return dict(self.bases)
