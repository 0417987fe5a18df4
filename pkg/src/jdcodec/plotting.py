"""Rate-distortion figures rendered to image files."""

from __future__ import annotations

import os
from typing import Sequence

from .metrics import RDPoint


def plot_rd(points: Sequence[RDPoint], path: str | os.PathLike, title: str = "") -> None:
    """MS-SSIM and PSNR against bpp, one line per codec, written to ``path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[str, list[RDPoint]] = {}
    for p in points:
        groups.setdefault(p.codec, []).append(p)
    fig, (ax_s, ax_p) = plt.subplots(1, 2, figsize=(10, 4))
    for codec, pts in sorted(groups.items()):
        pts = sorted(pts, key=lambda p: p.bpp)
        x = [p.bpp for p in pts]
        ax_s.plot(x, [p.ms_ssim for p in pts], marker="o", label=codec)
        ax_p.plot(x, [p.psnr for p in pts], marker="o", label=codec)
    ax_s.set_ylabel("MS-SSIM")
    ax_p.set_ylabel("PSNR (dB)")
    for ax in (ax_s, ax_p):
        ax.set_xlabel("bits per pixel")
        ax.grid(alpha=0.3)
    ax_s.legend(fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
