"""Layer-catalog reader.

One layer per line: `name B L I O`, or `name B HW C_in C_out conv kH kW`
which lowers to L = H*W and I = C_in*kH*kW. Blank lines and `#` comments
are skipped.
"""
from dataclasses import dataclass
from pathlib import Path

from hlq.errors.handlers import ConfigError, HLQError
from hlq.models.tensor import LayerDims


@dataclass(frozen=True)
class CatalogLayer:
    name: str
    dims: LayerDims
    conv_kernel: tuple = None


def _positive_ints(fields, line_no):
    try:
        values = [int(f) for f in fields]
    except ValueError:
        raise ConfigError(f"catalog line {line_no}: expected integers, got {' '.join(fields)}")
    if any(v <= 0 for v in values):
        raise ConfigError(f"catalog line {line_no}: extents must be positive")
    return values


def parse_catalog(text):
    layers = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) == 5:
            name = fields[0]
            B, L, I, O = _positive_ints(fields[1:], line_no)
            kernel = None
        elif len(fields) == 8 and fields[5].lower() == "conv":
            name = fields[0]
            B, L, C_in, O = _positive_ints(fields[1:5], line_no)
            kH, kW = _positive_ints(fields[6:], line_no)
            I = C_in * kH * kW
            kernel = (kH, kW)
        else:
            raise ConfigError(
                f"catalog line {line_no}: expected 'name B L I O [conv kH kW]', got {line!r}"
            )
        try:
            dims = LayerDims(B, L, I, O)
        except HLQError as e:
            raise ConfigError(f"catalog line {line_no}: {e}")
        layers.append(CatalogLayer(name, dims, kernel))
    return layers


def load_catalog(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"layer catalog not found: {path}")
    return parse_catalog(path.read_text())
