from __future__ import annotations
import io
import logging
import os
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

Panel = Tuple[str, np.ndarray]


def _limit(panels: Sequence[Panel]) -> float:
    finite = [np.abs(p[np.isfinite(p).all(axis=1)]).max() for _, p in panels if len(p)]
    return 1.1 * max(finite) if finite else 1.0


def render_panels(panels: Sequence[Panel], *, config_hash: str, title: Optional[str] = None,
                  limit: Optional[float] = None) -> str:
    """Side-by-side 2D scatter panels as a self-contained SVG string.

    Panel i is drawn into an SVG group with id `panel-i`; the config hash is
    recorded in a leading XML comment and salts the SVG ids.
    """
    lim = limit or _limit(panels)
    with plt.rc_context({'svg.hashsalt': config_hash, 'svg.fonttype': 'none'}):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2), squeeze=False)
        for i, (ax, (label, pts)) in enumerate(zip(axes[0], panels)):
            pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
            ax.scatter(pts[:, 0], pts[:, 1], s=2.0, alpha=0.6, linewidths=0, gid=f'panel-{i}')
            ax.set_title(label, fontsize=9)
            ax.set_xlim(-lim, lim)
            ax.set_ylim(-lim, lim)
            ax.set_aspect('equal')
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title, fontsize=10)
        buf = io.StringIO()
        fig.savefig(buf, format='svg', metadata={'Date': None})
        plt.close(fig)
    svg = buf.getvalue()
    comment = f"<!-- ddss config_hash={config_hash} panels={'|'.join(label for label, _ in panels)} -->\n"
    head, sep, rest = svg.partition('?>\n')
    return head + sep + comment + rest if sep else comment + svg


def write_panels(path: str, panels: Sequence[Panel], *, config_hash: str, title: Optional[str] = None) -> str:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    svg = render_panels(panels, config_hash=config_hash, title=title)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(svg)
    logger.debug("wrote %d panels to %s", len(panels), path)
    return path
