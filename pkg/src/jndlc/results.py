"""RD results files (JSON, with a CSV mirror) and atomic file writes."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

from .errors import FormatError
from .metrics import JNDQuality, RDPoint, RDResults

CSV_COLUMNS = ("method", "lambda", "bpp", "psnr", "msssim")


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        # mkstemp creates 0600 files; use the usual umask-derived mode instead
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v: float):
    # JSON has no infinity; identical images are written as null PSNR
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _point_dict(p: RDPoint) -> dict:
    d = {"lambda": _num(p.lam), "bpp": p.bpp, "psnr": _num(p.psnr), "msssim": p.msssim}
    if p.image_id is not None:
        d["image_id"] = p.image_id
    return d


def results_to_dict(r: RDResults) -> dict:
    out = {
        "dataset_id": r.dataset_id,
        "method_id": r.method_id,
        "points": [_point_dict(p) for p in r.points],
        "jnd": [{"image_id": j.image_id, "metric": j.metric, "value": _num(j.value)} for j in r.jnd],
    }
    if r.per_image:
        out["per_image"] = [_point_dict(p) for p in r.per_image]
    if r.meta:
        out["meta"] = r.meta
    return out


def _float(d: dict, key: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise FormatError(f"missing field {key!r}")
        return default
    v = d[key]
    if v is None:
        return math.inf if key in ("psnr", "value") else math.nan
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"field {key!r} must be a number, got {v!r}")
    return float(v)


def _parse_point(d, method_id: str) -> RDPoint:
    if not isinstance(d, dict):
        raise FormatError("RD point must be an object")
    try:
        return RDPoint(
            bpp=_float(d, "bpp"),
            psnr=_float(d, "psnr"),
            msssim=_float(d, "msssim"),
            lam=_float(d, "lambda", math.nan),
            method_id=method_id,
            image_id=d.get("image_id"),
        )
    except ValueError as e:
        raise FormatError(str(e)) from e


def results_from_dict(d) -> RDResults:
    if not isinstance(d, dict):
        raise FormatError("results file must hold a JSON object")
    for key in ("dataset_id", "method_id", "points"):
        if key not in d:
            raise FormatError(f"results file is missing {key!r}")
    if not isinstance(d["points"], list):
        raise FormatError("'points' must be a list")
    method = str(d["method_id"])
    jnd = []
    for j in d.get("jnd", []):
        try:
            jnd.append(JNDQuality(_float(j, "value"), str(j["metric"]), str(j.get("image_id", ""))))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad jnd entry {j!r}: {e}") from e
    return RDResults(
        dataset_id=str(d["dataset_id"]),
        method_id=method,
        points=[_parse_point(p, method) for p in d["points"]],
        jnd=jnd,
        per_image=[_parse_point(p, method) for p in d.get("per_image", [])],
        meta=dict(d.get("meta", {})),
    )


def rows_for_plot(results: list[RDResults]) -> list[dict]:
    rows = []
    for r in results:
        for p in r.points:
            rows.append({"method": r.method_id, "lambda": p.lam, "bpp": p.bpp, "psnr": p.psnr, "msssim": p.msssim})
    rows.sort(key=lambda row: (row["method"], row["bpp"]))
    return rows


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def write_results(path: str | Path, results: RDResults, csv_mirror: bool = True) -> None:
    path = Path(path)
    atomic_write(path, json.dumps(results_to_dict(results), indent=2, sort_keys=True) + "\n")
    if csv_mirror:
        atomic_write(path.with_suffix(".csv"), rows_to_csv(rows_for_plot([results])))


def load_results(path: str | Path) -> RDResults:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    return results_from_dict(data)
