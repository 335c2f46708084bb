import csv
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson

from core.errors import EvaluationError
from core.parameters import Params, flatten, unflatten
from core.sampling import ObservationSet, observation_header
from utils.logger import logger

HISTORY_COLUMNS = ["step", "loss_total", "loss_dyn", "loss_bc", "loss_init", "loss_obs", "validation"]

CHECKPOINT_BLOB = "checkpoint.bin"
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_METADATA = "metadata.json"

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_SORT_KEYS


def _number(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


class ArtifactStore:
    @staticmethod
    def write_json(path: Path, payload: Any) -> Path:
        """Write JSON with sorted keys so identical payloads give identical bytes"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(orjson.dumps(payload, option=JSON_OPTIONS))
        return path

    @staticmethod
    def read_json(path: Path) -> Any:
        return orjson.loads(Path(path).read_bytes())

    @staticmethod
    def write_history(path: Path, history: Sequence[Dict[str, Optional[float]]]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for step, record in enumerate(history):
                writer.writerow({
                    "step": step,
                    "loss_total": _number(record["total"]),
                    "loss_dyn": _number(record["dyn"]),
                    "loss_bc": _number(record["bc"]),
                    "loss_init": _number(record["init"]),
                    "loss_obs": _number(record["obs"]),
                    "validation": _number(record.get("validation")),
                })
        return path

    @staticmethod
    def read_history(path: Path) -> List[Dict[str, str]]:
        with Path(path).open(newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))

    @staticmethod
    def write_checkpoint(directory: Path, params: Params, metadata: Dict[str, Any]) -> Path:
        """Parameter blob (little-endian float64), its shape manifest and run metadata"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        vector, manifest = flatten(params)
        (directory / CHECKPOINT_BLOB).write_bytes(vector.astype("<f8").tobytes())
        ArtifactStore.write_json(directory / CHECKPOINT_MANIFEST, manifest)
        ArtifactStore.write_json(directory / CHECKPOINT_METADATA, metadata)
        logger.info(f"Checkpoint written to {directory} ({vector.size} values)")
        return directory

    @staticmethod
    def read_checkpoint(directory: Path, like: Params) -> Tuple[Params, Dict[str, Any]]:
        directory = Path(directory)
        vector = np.frombuffer((directory / CHECKPOINT_BLOB).read_bytes(), dtype="<f8")
        manifest = ArtifactStore.read_json(directory / CHECKPOINT_MANIFEST)
        metadata = ArtifactStore.read_json(directory / CHECKPOINT_METADATA)
        return unflatten(vector, manifest, like), metadata

    @staticmethod
    def write_reference_table(path: Path, reference: ObservationSet, has_time: bool, d: int) -> Path:
        """CSV preceded by a ``# rows=N`` line declaring the row count"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            f.write(f"# rows={len(reference)}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(observation_header(has_time, d, reference.values.shape[1]))
            for point, value in zip(reference.points, reference.values):
                writer.writerow([repr(float(v)) for v in (*point, *value)])
        return path

    @staticmethod
    def read_reference_table(path: Path, has_time: bool, d: int) -> ObservationSet:
        path = Path(path)
        if not path.is_file():
            raise EvaluationError(f"reference table not found: {path}")
        with path.open(newline="", encoding="utf-8") as f:
            first = f.readline().strip()
            if not first.startswith("# rows="):
                raise EvaluationError(f"reference table {path} lacks its '# rows=N' header")
            declared = int(first.split("=", 1)[1])
            rows = [row for row in csv.reader(f) if row]
        header, body = rows[0], rows[1:]
        n_point = (1 if has_time else 0) + d
        if header[:n_point] != observation_header(has_time, d)[:n_point]:
            raise EvaluationError(f"reference table {path} has columns {header}")
        if len(body) != declared:
            raise EvaluationError(f"reference table {path} declares {declared} rows but holds {len(body)}")
        data = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
        return ObservationSet(data[:, :n_point], data[:, n_point:], source=f"table:{path.name}")


artifact_store = ArtifactStore()
