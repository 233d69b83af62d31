"""Reconstruction diagnostics: RMSE, angle-averaged spectra, scatters, line traces.

Writers emit comma-separated text with a one-line header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measure import PointOp, PointSet


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b, channel: int | None = None) -> float:
    a, b = _pair(a, b)
    if channel is not None:
        a, b = a[channel], b[channel]
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class SpectrumSeries:
    """Per-channel mean squared modal amplitude in integer wavenumber bins."""

    k: np.ndarray
    energy: np.ndarray   # (C, n_bins)
    counts: np.ndarray   # (n_bins,) number of modes per bin

    def total(self) -> np.ndarray:
        """Per-channel sum of squared magnitude over all modes."""
        return (self.energy * self.counts).sum(axis=1)


def _radial_bins(h: int, w: int):
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    kr = np.floor(np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2) + 0.5).astype(int)
    n_bins = min(h, w) // 2 + 1
    # corner modes beyond the inscribed circle fold into the last bin
    return np.minimum(kr, n_bins - 1), n_bins


def angle_averaged_spectrum(state) -> SpectrumSeries:
    """Bin ``|FFT|^2`` (orthonormal) of each channel by rounded radial wavenumber.

    Bins run ``k = 0 .. min(H, W) // 2``; modes with larger radius are counted
    in the last bin so that bin energy times population sums to the field's
    total squared magnitude.
    """
    x = np.asarray(getattr(state, "data", state), dtype=np.float64)
    c, h, w = x.shape
    kr, n_bins = _radial_bins(h, w)
    power = np.abs(np.fft.fft2(x, norm="ortho")) ** 2
    counts = np.bincount(kr.ravel(), minlength=n_bins)
    energy = np.stack([np.bincount(kr.ravel(), weights=p.ravel(), minlength=n_bins) for p in power])
    return SpectrumSeries(np.arange(n_bins), energy / counts, counts)


def mean_spectrum(states) -> SpectrumSeries:
    specs = [angle_averaged_spectrum(s) for s in states]
    return SpectrumSeries(specs[0].k, np.mean([s.energy for s in specs], axis=0), specs[0].counts)


def high_k_deficit(recon: SpectrumSeries, truth: SpectrumSeries, k_cut: int) -> float:
    """Relative energy shortfall of ``recon`` against ``truth`` over bins ``k > k_cut``.

    Returns ``sum max(E_true - E_rec, 0) / sum E_true`` across channels and bins.
    """
    sel = truth.k > k_cut
    gap = np.maximum(truth.energy[:, sel] - recon.energy[:, sel], 0.0)
    return float(gap.sum() / truth.energy[:, sel].sum())


@dataclass(frozen=True)
class ScatterSet:
    tag: np.ndarray          # "observed" / "unobserved"
    channel: np.ndarray
    reference: np.ndarray
    reconstructed: np.ndarray

    def __post_init__(self):
        n = len(self.reference)
        if not (len(self.tag) == len(self.channel) == len(self.reconstructed) == n):
            raise ValueError("scatter arrays must have equal lengths")

    def subset(self, tag: str) -> "ScatterSet":
        m = self.tag == tag
        return ScatterSet(self.tag[m], self.channel[m], self.reference[m], self.reconstructed[m])


def extract_scatter(reference, reconstructed, pts: PointSet, full_grid_mask, channels: Sequence[str],
                    n_unobserved: int | None = None, rng: np.random.Generator | None = None) -> ScatterSet:
    """Pair values at observation points and at grid nodes outside ``full_grid_mask``.

    ``full_grid_mask`` is a boolean ``(H, W)`` array marking nodes treated as
    observed. Unobserved nodes are sampled evenly across rows (stratified by
    row), ``n_unobserved`` per channel, or all of them when that is ``None``.
    """
    ref, rec = _pair(reference, reconstructed)
    c, h, w = ref.shape
    op = PointOp(ref.shape, channels, pts)
    tags = ["observed"] * len(pts)
    chan = list(op.channel_idx)
    r_vals = list(op.apply(ref))
    x_vals = list(op.apply(rec))
    mask = np.asarray(full_grid_mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match grid {(h, w)}")
    free = np.argwhere(~mask)
    if len(free) and n_unobserved is not None and n_unobserved < len(free):
        rng = np.random.default_rng(0) if rng is None else rng
        # stratify: take an even share from each row, then fill at random
        picks = []
        rows = np.unique(free[:, 0])
        per_row = max(1, n_unobserved // len(rows))
        for r in rows:
            cand = free[free[:, 0] == r]
            picks.append(cand[rng.permutation(len(cand))[:per_row]])
        free = np.concatenate(picks)[:n_unobserved]
    for ch in range(c):
        for (iy, ix) in free:
            tags.append("unobserved")
            chan.append(ch)
            r_vals.append(ref[ch, iy, ix])
            x_vals.append(rec[ch, iy, ix])
    return ScatterSet(np.array(tags), np.array(chan, dtype=int), np.array(r_vals), np.array(x_vals))


def line_trace(state, y_row: int) -> np.ndarray:
    """Values of row ``y_row`` for every channel, shape ``(C, W)``."""
    x = np.asarray(getattr(state, "data", state))
    if not 0 <= y_row < x.shape[1]:
        raise IndexError(f"row {y_row} outside 0..{x.shape[1] - 1}")
    return x[:, y_row, :].copy()


def points_mask(pts: PointSet, shape, radius: int = 0) -> np.ndarray:
    """Boolean ``(H, W)`` mask of nodes within ``radius`` cells of any point."""
    _, h, w = shape
    iy = np.clip(np.floor(pts.y_norm * h).astype(int), 0, h - 1)
    ix = np.floor(pts.x_norm * w).astype(int) % w
    mask = np.zeros((h, w), dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            mask[np.clip(iy + dy, 0, h - 1), (ix + dx) % w] = True
    return mask


def write_spectrum_csv(path, spec: SpectrumSeries, channels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["k", "channel", "energy"])
        for ci, name in enumerate(channels):
            for k, e in zip(spec.k, spec.energy[ci]):
                out.writerow([int(k), name, repr(float(e))])


def write_scatter_csv(path, sc: ScatterSet, channels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["tag", "channel", "reference", "reconstructed"])
        for t, c, r, x in zip(sc.tag, sc.channel, sc.reference, sc.reconstructed):
            out.writerow([t, channels[c], repr(float(r)), repr(float(x))])


def write_trace_csv(path, traces: dict[str, np.ndarray], channels: Sequence[str], y_row: int) -> None:
    """``traces`` maps a source label (truth, mean, ...) to a ``(C, W)`` trace."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["source", "channel", "y_row", "x", "value"])
        for label, tr in traces.items():
            for ci, name in enumerate(channels):
                for ix, v in enumerate(tr[ci]):
                    out.writerow([label, name, y_row, ix, repr(float(v))])


def read_spectrum_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["channel"], []).append((int(rec["k"]), float(rec["energy"])))
    return {c: np.array([e for _, e in sorted(v)]) for c, v in rows.items()}
