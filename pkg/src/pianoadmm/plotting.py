"""Figure rendering for the CLI's ``--figures`` option.

matplotlib is imported lazily so the library and the CLI work without it
unless figures are requested.
"""

import os

import numpy as np

DPI = 120


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def activity_figure(A, path, hop_seconds=None, pitch_map=None, title="activity"):
    """Flattened ``KL x N`` activity as an image, one band per key."""
    plt = _pyplot()
    K, L, N = A.shape
    F = A.reshape(K * L, N)
    fig, ax = plt.subplots(figsize=(8, 4), dpi=DPI)
    extent = [0, N * (hop_seconds or 1.0), K * L, 0]
    im = ax.imshow(F, aspect="auto", interpolation="nearest", cmap="gray_r",
                   extent=extent)
    for k in range(1, K):
        ax.axhline(k * L, color="tab:red", lw=0.4)
    if pitch_map is not None and K <= 24:
        ax.set_yticks(np.arange(K) * L + L / 2.0)
        ax.set_yticklabels([str(p) for p in pitch_map])
        ax.set_ylabel("MIDI pitch")
    else:
        ax.set_ylabel("template row")
    ax.set_xlabel("time (s)" if hop_seconds else "frame")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def residual_figure(primal, dual, path, stages=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=DPI)
    it = np.arange(1, len(primal) + 1)
    ax.semilogy(it, np.maximum(primal, 1e-300), label="primal")
    ax.semilogy(it, np.maximum(dual, 1e-300), label="dual")
    if stages and len(stages) > 1:
        ax.axvline(stages[0] + 0.5, color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual norm")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def piano_roll_figure(events, path, reference=None):
    """Predicted notes as bars, optional ground truth drawn underneath."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 3.5), dpi=DPI)
    for evs, color, h, label in ((reference or [], "0.75", 0.8, "reference"),
                                 (events, "tab:blue", 0.4, "transcribed")):
        for i, e in enumerate(evs):
            ax.broken_barh([(e.onset, max(e.duration, 1e-3))], (e.pitch - h / 2, h),
                           facecolors=color, label=label if i == 0 else None)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("MIDI pitch")
    if events or reference:
        ax.legend(frameon=False, loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_transcription(outdir, result, pitch_map, hop_seconds, reference=None):
    """Write the standard transcription figures; returns the file paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = [activity_figure(result.A, os.path.join(outdir, "activity.png"),
                             hop_seconds, pitch_map),
             residual_figure(result.report.primal, result.report.dual,
                             os.path.join(outdir, "residuals.png"),
                             result.report.stages),
             piano_roll_figure(result.events, os.path.join(outdir, "notes.png"),
                               reference)]
    if result.B is not None:
        paths.append(activity_figure(result.B, os.path.join(outdir, "binary.png"),
                                     hop_seconds, pitch_map, title="refined states"))
    return paths
