"""Static SVG skeleton figures (2D poses and oblique-projected 3D poses)."""

import numpy as np

SEGMENT_COLORS = {"legs": "#1f77b4", "spine": "#333333", "left": "#2ca02c",
                  "right": "#d62728"}

_PANEL = 240.0
_MARGIN = 24.0


def _bone_color(topology, parent, child):
    legs = set(topology.segments["legs"]) | {topology.root_index}
    chain = set(topology.spine_chain) | {topology.root_index}
    left = set(topology.side_exclusive("left"))
    if child in left or parent in left:
        return SEGMENT_COLORS["left"]
    if child in set(topology.side_exclusive("right")) or parent in set(
            topology.side_exclusive("right")):
        return SEGMENT_COLORS["right"]
    if child in legs and parent in legs:
        return SEGMENT_COLORS["legs"]
    if child in chain or parent in chain:
        return SEGMENT_COLORS["spine"]
    return "#777777"


def _project_oblique(pts3d):
    """Fixed oblique view: depth shifts points along a diagonal."""
    x = pts3d[:, 0] - 0.45 * pts3d[:, 2]
    y = pts3d[:, 1] - 0.25 * pts3d[:, 2]
    return np.stack([x, y], axis=1)


def _panel(xy, topology, offset_x, title, masked=()):
    finite = np.isfinite(xy).all(axis=1)
    span = xy[finite]
    lo = span.min(axis=0)
    hi = span.max(axis=0)
    extent = max(float((hi - lo).max()), 1e-9)
    scale = (_PANEL - 2 * _MARGIN) / extent
    mid = 0.5 * (lo + hi)

    def to_px(p):
        return (offset_x + _PANEL / 2 + (p[0] - mid[0]) * scale,
                _PANEL / 2 + (p[1] - mid[1]) * scale)

    parts = [f'<text x="{offset_x + 8:.1f}" y="16" font-size="12" '
             f'font-family="monospace">{title}</text>']
    for parent, child in topology.bones:
        if not (finite[parent] and finite[child]):
            continue
        x1, y1 = to_px(xy[parent])
        x2, y2 = to_px(xy[child])
        color = _bone_color(topology, parent, child)
        parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                     f'stroke="{color}" stroke-width="2"/>')
    for j in range(xy.shape[0]):
        if not finite[j]:
            continue
        x, y = to_px(xy[j])
        fill = "#ff00ff" if j in set(masked) else "#000000"
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{fill}"/>')
    return parts


def render_pose_svg(path, topology, pose_2d=None, poses_3d=None, masked=()):
    """Write one SVG with a 2D panel and any number of labelled 3D panels.

    poses_3d: list of (title, (k, 3) array). Masked joints, when given,
    are highlighted in the 2D panel.
    """
    poses_3d = poses_3d or []
    n_panels = (1 if pose_2d is not None else 0) + len(poses_3d)
    width = n_panels * _PANEL
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
             f'height="{_PANEL:.0f}" viewBox="0 0 {width:.0f} {_PANEL:.0f}">',
             f'<rect width="{width:.0f}" height="{_PANEL:.0f}" fill="white"/>']
    offset = 0.0
    if pose_2d is not None:
        parts += _panel(np.asarray(pose_2d, dtype=np.float64), topology, offset,
                        "2d input", masked=masked)
        offset += _PANEL
    for title, pts in poses_3d:
        xy = _project_oblique(np.asarray(pts, dtype=np.float64))
        parts += _panel(xy, topology, offset, title)
        offset += _PANEL
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
