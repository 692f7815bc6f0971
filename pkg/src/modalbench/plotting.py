"""Optional PNG renderings of the CLI tables (needs matplotlib)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import rfp  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def rfp_figure(frf, results, path):
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.semilogy(frf.frequencies, np.abs(frf.values), lw=0.8, label="measured")
    for r in results:
        lo, hi = r.band if r.band is not None else (frf.frequencies[0], frf.frequencies[-1])
        sub = frf.band(lo, hi)
        ax.semilogy(sub.frequencies, np.abs(rfp.evaluate(r, sub.frequencies)), "r", lw=1.2)
        for m in r.modal:
            ax.axvline(m.frequency_hz, color="k", ls=":", lw=0.6)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("|H| (g/N)")
    ax.legend()
    _save(fig, path)


def diagram_figure(diagram, path):
    fig, ax = plt.subplots(figsize=(8, 4))
    f = np.array([e.frequency_hz for e in diagram.entries])
    o = np.array([e.order for e in diagram.entries])
    c = np.array([e.consistent for e in diagram.entries], bool)
    ax.plot(f[~c], o[~c], "x", color="0.6", ms=4, label="inconsistent")
    ax.plot(f[c], o[c], "o", color="C0", ms=4, label="consistent")
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("model order")
    if diagram.svs.size:
        ax2 = ax.twinx()
        ax2.semilogy(diagram.svs_frequencies, diagram.svs.T, lw=0.7, alpha=0.6)
        ax2.set_ylabel("singular values")
    ax.legend(loc="upper right")
    _save(fig, path)


def control_figure(result, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    f = result.target.grid.values
    a1.semilogy(f, result.target.magnitude + 1e-30, "k", lw=1.2, label="target")
    a1.semilogy(f, result.final.measured_psd + 1e-30, lw=0.8, label="measured (final)")
    a1.semilogy(f, result.drive_psds[-1] + 1e-30, lw=0.8, label="drive (final)")
    a1.set_xlabel("frequency (Hz)")
    a1.set_ylabel("PSD")
    a1.legend()
    a2.semilogy([s.iteration for s in result.history], [s.error for s in result.history], "o-")
    a2.set_xlabel("iteration")
    a2.set_ylabel("epsilon")
    _save(fig, path)


def confusion_figure(matrix, labels, path):
    fig, ax = plt.subplots(figsize=(4 + 0.4 * len(labels), 4))
    ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(labels)), [str(x) for x in labels], rotation=45)
    ax.set_yticks(range(len(labels)), [str(x) for x in labels])
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _save(fig, path)
