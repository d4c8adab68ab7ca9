"""Vector export for external 2-D projection tools."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..fusion import FusedSpace
from ..profiles import UserVector


def export_tsne_inputs(space: FusedSpace, profiles: Mapping[int, UserVector], path: str | Path) -> int:
    """Write item then user vectors as JSON Lines with a ``role`` label; returns the line count."""
    lines = [
        json.dumps({"role": "item", "id": int(i), "vec": v.tolist()})
        for i, v in zip(space.ids, np.asarray(space.vectors, dtype=np.float64))
    ]
    lines += [
        json.dumps({"role": "user", "id": int(u), "vec": np.asarray(profiles[u].vec, dtype=np.float64).tolist()})
        for u in sorted(profiles)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def load_tsne_inputs(path: str | Path) -> dict[str, dict[int, np.ndarray]]:
    out: dict[str, dict[int, np.ndarray]] = {"item": {}, "user": {}}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out[o["role"]][int(o["id"])] = np.asarray(o["vec"], dtype=np.float64)
    return out
