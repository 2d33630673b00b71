"""Persistence: JSON-Lines records, CSV reports, NumPy side files.

Every file carries the config hash and master seed: the records file in a
leading ``{"_header": ...}`` line, CSV files in ``#`` comment lines, NumPy
archives in ``meta_*`` entries.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import TOOL_VERSION
from .ensemble import RECORD_FIELDS, HeightData, RunRecord, fmt_float
from .errors import PolymerLabError

OUT_ENV = "POLYMERLAB_OUT"
DEFAULT_OUT = "polymerlab_out"


class CorruptRecords(PolymerLabError):
    """A records file could not be parsed; ``offset`` is the byte offset of the bad line."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: corrupt record at byte offset {offset}: {reason}")
        self.offset = offset


@dataclass(frozen=True)
class Header:
    config_hash: str
    master_seed: int
    tool_version: str


def dumps17(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps17(v)}" for k, v in sorted(obj.items())) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps17(v) for v in obj) + "]"
    if isinstance(obj, (np.floating, np.integer)):
        return dumps17(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_records(path: str | Path, records: Iterable[RunRecord], header: Header) -> None:
    head = dumps17({"_header": {"config_hash": header.config_hash, "master_seed": header.master_seed,
                                "tool_version": header.tool_version, "fields": list(RECORD_FIELDS)}})
    lines = [head] + [r.to_json() for r in records]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_records(path: str | Path) -> tuple[Header | None, list[RunRecord]]:
    """Parse a records file; raises :class:`CorruptRecords` naming the byte offset of a bad line."""
    raw = Path(path).read_bytes()
    header = None
    records = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        start = offset
        offset += len(line)
        text = line.strip()
        if not text:
            continue
        if not line.endswith(b"\n"):
            raise CorruptRecords(path, start, "truncated line (no terminating newline)")
        try:
            obj = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptRecords(path, start, str(exc)) from exc
        if not isinstance(obj, dict):
            raise CorruptRecords(path, start, "line is not a JSON object")
        if "_header" in obj:
            h = obj["_header"]
            header = Header(str(h["config_hash"]), int(h["master_seed"]), str(h.get("tool_version", "")))
            continue
        try:
            records.append(RunRecord.from_dict(obj))
        except (PolymerLabError, TypeError, ValueError) as exc:
            raise CorruptRecords(path, start, str(exc)) from exc
    return header, records


def write_csv(path: str | Path, header: Header, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={header.config_hash}\n# master_seed={header.master_seed}\n# tool_version={header.tool_version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    _atomic_write(Path(path), buf.getvalue().encode())


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else fmt_float(float(v))
    return str(v)


def read_csv(path: str | Path) -> tuple[dict, list[dict]]:
    """Comment metadata and rows (as strings) of a CSV written by :func:`write_csv`."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def savez_deterministic(path: str | Path, arrays: dict) -> None:
    """``.npz`` archive with fixed member timestamps, so identical arrays give identical bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, member.getvalue())
    _atomic_write(Path(path), buf.getvalue())


def save_heights(path: str | Path, data: HeightData, header: Header) -> None:
    savez_deterministic(path, {
        "times": np.asarray(data.times, dtype=np.float64),
        "h": data.h,
        "rho": data.rho if data.rho is not None else np.zeros(0),
        "ids": data.ids if data.ids is not None else np.zeros(0, dtype=np.int64),
        "meta_config_hash": np.array(header.config_hash),
        "meta_master_seed": np.array(str(header.master_seed)),
    })


def load_heights(path: str | Path) -> tuple[HeightData, str]:
    with np.load(path) as z:
        rho = z["rho"] if z["rho"].size else None
        ids = z["ids"] if z["ids"].size else None
        data = HeightData(tuple(float(t) for t in z["times"]), z["h"], rho, ids)
        return data, str(z["meta_config_hash"])


def save_bks(path: str | Path, bks: dict, header: Header) -> None:
    arrays = {"meta_config_hash": np.array(header.config_hash), "meta_master_seed": np.array(str(header.master_seed))}
    for t, q in bks.items():
        key = fmt_float(t)
        arrays[f"T{key}_steps"] = q.steps
        arrays[f"T{key}_M"] = np.array(q.M_grid)
        arrays[f"T{key}_n"] = np.array(q.n_samples)
        for M in q.M_grid:
            arrays[f"T{key}_M{M}_mean"] = q.mean_dbar[M]
            arrays[f"T{key}_M{M}_se"] = q.se_dbar[M]
            arrays[f"T{key}_M{M}_A"] = q.A[M]
            arrays[f"T{key}_M{M}_hM"] = q.h_M[M]
            arrays[f"T{key}_M{M}_vol"] = np.array(q.box_volume[M])
    savez_deterministic(path, arrays)


def load_bks(path: str | Path) -> tuple[dict, str]:
    from .observables import BksQuantities

    out = {}
    with np.load(path) as z:
        keys = set(z.files)
        Ts = sorted({k[1:].split("_")[0] for k in keys if k.startswith("T") and k.endswith("_steps")}, key=float)
        for key in Ts:
            Ms = tuple(int(m) for m in z[f"T{key}_M"])
            q = BksQuantities(
                float(key), z[f"T{key}_steps"], Ms,
                {M: z[f"T{key}_M{M}_hM"] for M in Ms},
                {M: z[f"T{key}_M{M}_mean"] for M in Ms},
                {M: z[f"T{key}_M{M}_se"] for M in Ms},
                {M: z[f"T{key}_M{M}_A"] for M in Ms},
                {M: float(z[f"T{key}_M{M}_vol"]) for M in Ms},
                int(z[f"T{key}_n"]),
            )
            out[float(key)] = q
        return out, str(z["meta_config_hash"])


def make_header(config_hash: str, master_seed: int) -> Header:
    return Header(config_hash, int(master_seed), TOOL_VERSION)
