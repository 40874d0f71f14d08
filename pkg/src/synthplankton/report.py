"""Run-report rows and the results-table emitter (CSV / Markdown)."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

COLUMNS = (
    ("gan_model", "GAN Model"),
    ("data_size", "Data Size"),
    ("resolution", "Resolution"),
    ("iterations", "Iterations"),
    ("batch_size", "Batch Size"),
    ("training_time", "Training Time"),
    ("fid", "FID"),
    ("kid", "KID"),
    ("device_label", "GPU model"),
)


@dataclass
class RunReport:
    gan_model: str
    data_size: int
    resolution: str
    iterations: int
    batch_size: int
    training_time: str
    fid: float
    kid: float
    device_label: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def format_training_time(seconds: float) -> str:
    """Render wall-clock seconds as ``DDd HHh MMm`` (minutes truncated)."""
    minutes = int(max(0.0, seconds) // 60)
    days, rem = divmod(minutes, 24 * 60)
    hours, mins = divmod(rem, 60)
    return f"{days:02d}d {hours:02d}h {mins:02d}m"


def parse_training_time(text: str) -> float:
    total = 0
    for part in text.split():
        unit = part[-1]
        total += int(part[:-1]) * {"d": 86400, "h": 3600, "m": 60}[unit]
    return float(total)


def _minima(reports: list[RunReport], attr: str) -> float:
    return min(round(getattr(r, attr), 3) for r in reports)


def emit_table(reports: list[RunReport], format: str = "markdown") -> str:
    """Format reports as a CSV or Markdown table, rows in input order.

    The Markdown form bolds every cell holding the minimum FID and the minimum
    KID (compared at the printed 3-decimal precision).
    """
    if not reports:
        raise ValueError("emit_table needs at least one report")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([key for key, _ in COLUMNS])
        for r in reports:
            writer.writerow(
                [r.gan_model, r.data_size, r.resolution, r.iterations, r.batch_size, r.training_time,
                 f"{r.fid:.3f}", f"{r.kid:.3f}", r.device_label]
            )
        return buf.getvalue()
    if format != "markdown":
        raise ValueError(f"unknown table format {format!r}")

    best_fid = _minima(reports, "fid")
    best_kid = _minima(reports, "kid")
    lines = [
        "| " + " | ".join(title for _, title in COLUMNS) + " |",
        "|" + "|".join("---" for _ in COLUMNS) + "|",
    ]
    for r in reports:
        fid_cell = f"{r.fid:.3f}"
        kid_cell = f"{r.kid:.3f}"
        if round(r.fid, 3) == best_fid:
            fid_cell = f"**{fid_cell}**"
        if round(r.kid, 3) == best_kid:
            kid_cell = f"**{kid_cell}**"
        cells = [r.gan_model, str(r.data_size), r.resolution, f"{r.iterations:,}", str(r.batch_size),
                 r.training_time, fid_cell, kid_cell, r.device_label]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_table_csv(text: str) -> list[RunReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        RunReport(
            gan_model=row["gan_model"],
            data_size=int(row["data_size"]),
            resolution=row["resolution"],
            iterations=int(row["iterations"]),
            batch_size=int(row["batch_size"]),
            training_time=row["training_time"],
            fid=float(row["fid"]),
            kid=float(row["kid"]),
            device_label=row["device_label"],
        )
        for row in rows
    ]
