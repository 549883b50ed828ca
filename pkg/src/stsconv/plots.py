"""Figure and raster exports: PGM grayscale matrices, CSV curves and matplotlib PNGs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["write_pgm", "read_pgm", "write_curve_csv", "argmax_path", "diagonal_deviation",
           "export_plots", "plot_losses", "plot_report"]


def write_pgm(path, matrix: np.ndarray) -> None:
    """Binary 8-bit PGM, one pixel per entry: height = rows, width = columns.

    Values are min-max scaled to 0..255; a constant matrix maps to 0.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"write_pgm needs a non-empty 2-D matrix, got shape {m.shape}")
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM is not supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def write_curve_csv(path, columns: dict) -> None:
    """CSV with a ``frame`` column followed by the given equal-length columns."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n = arrays[0].shape[0] if arrays else 0
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all CSV columns must have the same length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", *names])
        for i in range(n):
            w.writerow([i, *(repr(a[i].item()) for a in arrays)])


def argmax_path(attn: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(attn), axis=1)


def diagonal_deviation(attn: np.ndarray) -> float:
    """Mean |argmax_n(attn[t]) - t (N-1)/(T-1)| in key frames."""
    a = np.asarray(attn)
    T, N = a.shape
    diag = np.arange(T) * (N - 1) / max(T - 1, 1)
    return float(np.mean(np.abs(argmax_path(a) - diag)))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def export_plots(artifacts: dict, out_dir, rhythm_curve: np.ndarray | None = None, png: bool = True) -> list[Path]:
    """Write attention/mel PGMs, rhythm CSV and (optionally) PNG figures.

    ``artifacts`` is the mapping returned by :func:`stsconv.pipeline.read_artifacts`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "mel" not in artifacts:
        raise ValueError("inference artifacts lack a mel spectrogram")
    written = []
    for name, a in artifacts.get("attentions", {}).items():
        p = out / f"attention_{name}.pgm"
        write_pgm(p, a)
        written.append(p)
    mel = np.asarray(artifacts["mel"])
    p = out / "mel.pgm"
    # frequency on the vertical axis, low bins at the bottom
    write_pgm(p, mel.T[::-1])
    written.append(p)
    cols = {"code": artifacts["rhythm_indices"]}
    if rhythm_curve is not None:
        cols["rhythm"] = rhythm_curve
    p = out / "rhythm.csv"
    write_curve_csv(p, cols)
    written.append(p)
    if png:
        written += _figures(artifacts, out, rhythm_curve)
    return written


def _figures(artifacts: dict, out: Path, rhythm_curve) -> list[Path]:
    plt = _pyplot()
    written = []
    attns = artifacts.get("attentions", {})
    if attns:
        fig, axes = plt.subplots(1, len(attns), figsize=(4 * len(attns), 3.5), squeeze=False)
        for ax, (name, a) in zip(axes[0], sorted(attns.items())):
            ax.imshow(a.T, origin="lower", aspect="auto", cmap="magma")
            ax.plot(np.arange(a.shape[0]), argmax_path(a), color="cyan", lw=0.8)
            ax.set_title(f"{name} (dev {diagonal_deviation(a):.2f})")
            ax.set_xlabel("query frame")
            ax.set_ylabel("key frame")
        fig.tight_layout()
        p = out / "attention.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        written.append(p)
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True, height_ratios=[3, 1])
    axes[0].imshow(np.asarray(artifacts["mel"]).T, origin="lower", aspect="auto", cmap="viridis")
    axes[0].set_ylabel("mel bin")
    axes[1].step(np.arange(len(artifacts["rhythm_indices"])), artifacts["rhythm_indices"], where="mid",
                 label="code")
    if rhythm_curve is not None:
        ax2 = axes[1].twinx()
        ax2.plot(rhythm_curve, color="tab:orange", lw=0.8)
        ax2.set_ylim(0, 1)
    axes[1].set_xlabel("frame")
    axes[1].set_ylabel("rhythm code")
    fig.tight_layout()
    p = out / "mel_rhythm.png"
    fig.savefig(p, dpi=100)
    plt.close(fig)
    written.append(p)
    return written


def plot_losses(tlog_rows: list, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in tlog_rows]
    for name in ("total", "commit", "rhythm_ce", "attn", "mae", "ssim"):
        vals = [r.get(name) for r in tlog_rows]
        if any(v is not None for v in vals):
            ax.plot(steps, [np.nan if v is None else v for v in vals], label=name, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_report(report, path) -> Path:
    plt = _pyplot()
    ids = [s.id for s in report.utterances]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, ("lsd", "rca", "rrd")):
        ax.bar(range(len(ids)), [getattr(s, key) for s in report.utterances])
        ax.axhline(getattr(report, key), color="k", lw=0.8, ls="--")
        ax.set_title(key.upper())
        ax.set_xticks(range(len(ids)), ids, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
