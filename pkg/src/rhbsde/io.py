"""Binary path-bundle files and delimited tables."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .paths import PathBundle, TimeGrid

MAGIC = b"RHBP"
VERSION = 1


def write_bundle(bundle: PathBundle, path: str | Path) -> None:
    """Header (magic, version, JSON metadata) followed by little-endian float64/int64 blocks."""
    meta = {
        "n_paths": bundle.n_paths,
        "n_steps": bundle.grid.n_steps,
        "step_h": bundle.grid.step_h,
        "d": bundle.d,
        "m": bundle.m,
        "seed": int(bundle.seed),
        "label": bundle.label,
        "constant_sigma": bool(bundle.is_constant_sigma()),
        "initial_offset": None if bundle.initial_offset is None else np.asarray(bundle.initial_offset).tolist(),
        "has_censored": bundle.censored is not None,
    }
    head = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(bundle.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.stop_index, dtype="<i8").tobytes())
        sig = np.asarray(bundle.sigma_samples)
        if meta["constant_sigma"]:
            sig = sig[0, 0]
        fh.write(np.ascontiguousarray(sig, dtype="<f8").tobytes())
        if bundle.censored is not None:
            fh.write(np.ascontiguousarray(bundle.censored, dtype="u1").tobytes())


def read_bundle(path: str | Path) -> PathBundle:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a path-bundle file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    meta = json.loads(data[12:12 + hlen])
    pos = 12 + hlen
    n, N, d, m = meta["n_paths"], meta["n_steps"], meta["d"], meta["m"]

    def take(count, dtype, shape):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += size
        return arr

    X = take(n * (N + 1) * d, "<f8", (n, N + 1, d))
    W = take(n * (N + 1) * m, "<f8", (n, N + 1, m))
    stop = take(n, "<i8", (n,))
    if meta["constant_sigma"]:
        sig = np.broadcast_to(take(d * m, "<f8", (d, m)), (n, N, d, m))
    else:
        sig = take(n * N * d * m, "<f8", (n, N, d, m))
    censored = take(n, "u1", (n,)).astype(bool) if meta["has_censored"] else None
    offset = meta["initial_offset"]
    return PathBundle(
        grid=TimeGrid(meta["step_h"], N), X=X, W=W, stop_index=stop, sigma_samples=sig, seed=meta["seed"],
        initial_offset=np.zeros(d) if offset is None else np.asarray(offset), censored=censored, label=meta["label"],
    )


def write_csv(rows: Iterable[dict], path: str | Path, columns: list[str] | None = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return json.dumps(list(v))
    return v


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ---------------------------------------------------------------------------
# Solution tables


def surface_rows(sol, bins, times: np.ndarray) -> list[dict]:
    """Per (time, bin): value, Z and occupancy. Works for BSDE, RBSDE and 2BSDE solutions."""
    rows = []
    if hasattr(sol, "V"):
        for k in range(sol.V.shape[0]):
            for c, xc in enumerate(bins.centers):
                occ = float(sol.occupancy[:, k, c].max())
                if occ == 0:
                    continue
                rows.append({"t": float(times[k]), "x": float(xc), "value": float(sol.V[k, c]),
                             "z": float(sol.Z_agg[k, c, 0]), "occupancy": occ,
                             "argmax_member": int(sol.argmax_member[k, c])})
        return rows
    from .bsde import bin_surface

    ymean, counts = bin_surface(sol.Y, sol.bundle, bins)
    zmean, _ = bin_surface(sol.Z[..., 0], sol.bundle, bins)
    n = sol.bundle.n_paths
    for k in range(ymean.shape[0]):
        for c, xc in enumerate(bins.centers):
            if counts[k, c] == 0:
                continue
            rows.append({"t": float(times[k]), "x": float(xc), "value": float(ymean[k, c]),
                         "z": float(zmean[k, c]) if k < zmean.shape[0] else float("nan"),
                         "occupancy": float(counts[k, c] / n)})
    return rows
