import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from hlq.errors.handlers import ConfigError

logger = logging.getLogger(__name__)


class ResultStore:
    """Report files under one output directory; nothing is written outside it."""

    def __init__(self, out_dir):
        self.root = Path(out_dir).resolve()

    def path_for(self, name):
        path = (self.root / name).resolve()
        if path != self.root and self.root not in path.parents:
            raise ConfigError(f"refusing to write {name!r} outside the output directory {self.root}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_text(self, name, text):
        path = self.path_for(name)
        path.write_text(text, encoding="utf-8")
        logger.debug("wrote %s", path)
        return path

    def write_json(self, name, payload):
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, name, records):
        """One JSON object per line, keys sorted."""
        lines = [json.dumps(record, sort_keys=True) for record in records]
        return self.write_text(name, "".join(line + "\n" for line in lines))

    def write_csv(self, name, rows, fieldnames=None):
        rows = list(rows)
        fieldnames = fieldnames or (list(rows[0].keys()) if rows else [])
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return self.write_text(name, buffer.getvalue())

    def write_bytes(self, name, data):
        path = self.path_for(name)
        path.write_bytes(data)
        return path

    def write_array(self, name, array):
        path = self.path_for(name)
        with open(path, "wb") as handle:
            np.save(handle, np.asarray(array))
        return path

    def read_json(self, name):
        return json.loads(self.path_for(name).read_text(encoding="utf-8"))

    def read_jsonl(self, name):
        text = self.path_for(name).read_text(encoding="utf-8")
        return [json.loads(line) for line in text.splitlines() if line.strip()]
