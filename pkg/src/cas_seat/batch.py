"""Order-stable parallel fan-out and resumable JSONL checkpoints.

Workers may complete in any order; results are always returned in input
order, so downstream artifacts are independent of the parallelism level.
A checkpoint file accumulates one JSON object per completed unit keyed by
id; a resumed run skips everything already present.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(
    fn: Callable[[T], R], inputs: Sequence[T], parallelism: int = 1
) -> list[R]:
    """Apply fn to every input, in-order results, bounded worker count.

    If any call raises, all submitted work is drained first (completed
    units keep their side effects, e.g. checkpoint appends), then the
    error from the earliest failing input is re-raised.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if not inputs:
        return []
    if parallelism == 1:
        return [fn(x) for x in inputs]
    results: list = [None] * len(inputs)
    errors: list[tuple[int, Exception]] = []
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(fn, x) for x in inputs]
        for i, future in enumerate(futures):
            try:
                results[i] = future.result()
            except Exception as exc:  # noqa: BLE001 - re-raised below
                errors.append((i, exc))
    if errors:
        errors.sort(key=lambda pair: pair[0])
        raise errors[0][1]
    return results


class Checkpoint:
    """Append-only JSONL store of completed units, keyed by an 'id' field."""

    def __init__(self, path: Path | None) -> None:
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._done: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    self._done[obj["id"]] = obj

    def get(self, unit_id: str) -> dict | None:
        return self._done.get(unit_id)

    def record(self, unit_id: str, obj: dict) -> None:
        obj = {"id": unit_id, **obj}
        with self._lock:
            self._done[unit_id] = obj
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False))
                    fh.write("\n")
