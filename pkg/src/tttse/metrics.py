"""Reference-based quality metrics and result tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dsp import Spectrogram
from .losses import si_sdr_db


def metric_si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    return float(si_sdr_db(est, ref))


def metric_ssnr(est: np.ndarray, ref: np.ndarray, sample_rate: int = 16000, frame_ms: float = 32.0,
                clamp: tuple[float, float] = (-10.0, 35.0), silence: float = 1e-10) -> float | None:
    """Segmental SNR over non-overlapping frames, each clamped to ``clamp`` dB.

    Frames whose reference power is below ``silence`` are skipped; returns
    ``None`` when every frame is silent.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    n = int(round(frame_ms * sample_rate / 1000.0))
    n_frames = len(ref) // n
    if n_frames == 0:
        return None
    r = ref[:n_frames * n].reshape(n_frames, n)
    e = est[:n_frames * n].reshape(n_frames, n)
    p_ref = np.mean(r * r, axis=1)
    p_err = np.mean((r - e) ** 2, axis=1)
    keep = p_ref >= silence
    if not keep.any():
        return None
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(p_ref[keep]) - 10.0 * np.log10(p_err[keep])
    return float(np.mean(np.clip(snr, *clamp)))


def metric_lsd(est: Spectrogram | np.ndarray, ref: Spectrogram | np.ndarray, floor: float = 1e-8) -> float:
    """Mean over frames of the RMS (over bins) log-spectral difference, in dB."""
    e = np.abs(est.values if isinstance(est, Spectrogram) else est)
    r = np.abs(ref.values if isinstance(ref, Spectrogram) else ref)
    if e.shape != r.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {r.shape}")
    diff = 20.0 * (np.log10(np.maximum(r, floor)) - np.log10(np.maximum(e, floor)))
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=-1))))


@dataclass
class EvalRecord:
    uid: str
    method: str
    strategy: str
    domain: str
    si_sdr: float | None = None
    ssnr: float | None = None
    lsd: float | None = None
    wall_ms: float = 0.0
    ss_loss_before: float | None = None
    ss_loss_after: float | None = None
    delta_norm: float | None = None
    rolled_back: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


METRICS = ("si_sdr", "ssnr", "lsd")
METHOD_ORDER = ("noisy", "baseline", "msp", "nytt-gaussian", "nytt-real")
STRATEGY_ORDER = ("-", "joint", "standalone", "online", "online-batch", "online-batch-bias")
METHOD_LABEL = {"noisy": "Noisy", "baseline": "Baseline", "msp": "MSP", "nytt-gaussian": "NyTT-gaussian",
                "nytt-real": "NyTT-real"}
STRATEGY_LABEL = {"-": "-", "joint": "Joint Training", "standalone": "TTT-standalone", "online": "TTT-online",
                  "online-batch": "TTT-online-batch", "online-batch-bias": "TTT-online-batch-bias"}
SUBSTITUTION_NOTE = ("metrics: SI-SDR (dB), SSNR (dB), LSD (dB, lower is better); "
                     "they stand in for PESQ / STOI / DNSMOS, which are not computed")


def _rank(value: str, order: tuple[str, ...]) -> tuple[int, str]:
    return (order.index(value), "") if value in order else (len(order), value)


@dataclass
class Table:
    domains: list[str]
    rows: list[dict]

    def columns(self) -> list[str]:
        return ["method", "strategy"] + [f"{d}:{m}" for d in self.domains for m in METRICS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.rows:
            writer.writerow([_fmt(row.get(c)) for c in self.columns()])
        return buf.getvalue()

    def to_text(self) -> str:
        cols = self.columns()
        body = [[METHOD_LABEL.get(r["method"], r["method"]), STRATEGY_LABEL.get(r["strategy"], r["strategy"])]
                + [_fmt(r.get(c)) for c in cols[2:]] for r in self.rows]
        widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
        lines.append(SUBSTITUTION_NOTE)
        return "\n".join(lines)

    def value(self, method: str, strategy: str, domain: str, metric: str = "si_sdr") -> float | None:
        for r in self.rows:
            if r["method"] == method and r["strategy"] == strategy:
                return r.get(f"{domain}:{metric}")
        return None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.3f}"
    return str(v)


def aggregate(records: list[EvalRecord]) -> Table:
    """Mean metric per (method, strategy) row and per domain column, in the usual table order."""
    domains: list[str] = []
    groups: dict[tuple[str, str], dict[str, dict[str, list[float]]]] = {}
    for rec in records:
        if rec.domain not in domains:
            domains.append(rec.domain)
        cell = groups.setdefault((rec.method, rec.strategy), {}).setdefault(rec.domain, {m: [] for m in METRICS})
        for m in METRICS:
            v = getattr(rec, m)
            if v is not None and math.isfinite(v):
                cell[m].append(v)
    rows = []
    for method, strategy in sorted(groups, key=lambda k: (_rank(k[0], METHOD_ORDER), _rank(k[1], STRATEGY_ORDER))):
        row = {"method": method, "strategy": strategy}
        for d, cell in groups[(method, strategy)].items():
            for m in METRICS:
                row[f"{d}:{m}"] = float(np.mean(cell[m])) if cell[m] else None
        rows.append(row)
    return Table(domains, rows)


def record_fields() -> list[str]:
    return [f.name for f in fields(EvalRecord)]
