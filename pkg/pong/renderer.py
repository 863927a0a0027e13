import math
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .layout import Rectangle, layout_cells

if TYPE_CHECKING:
    from .generator import Panel

PANEL_SIZE = 80
WHITE = 255

#: attribute domains, indexed by the symbolic value of a panel
SHAPES = ("triangle", "square", "hexagon", "circle")
SIZES = (0.4, 0.5, 0.6, 0.7, 0.8)
SHADES = tuple(int(level) for level in np.linspace(0, 200, 6))
COUNTS = (1, 2, 3, 4)


class Shade:
    "Characters used by the text preview, darkest first."

    RAMP = "@%#*+=-:. "


#: polygon corner counts; zero marks a circle
CORNERS = {"triangle": 3, "square": 4, "hexagon": 6, "circle": 0}


def pixel_centers(size: int):
    coordinates = np.arange(size) + 0.5
    return np.meshgrid(coordinates, coordinates)  # x, y


def polygon_mask(size: int, center, radius: float, corners: int) -> np.ndarray:
    "Filled regular polygon with circumradius ``radius`` and a vertex straight up."
    xs, ys = pixel_centers(size)
    cx, cy = center
    angles = [-math.pi / 2 + 2 * math.pi * k / corners for k in range(corners)]
    if corners == 4:
        angles = [angle + math.pi / 4 for angle in angles]
    vertices = [(cx + radius * math.cos(a), cy + radius * math.sin(a)) for a in angles]
    mask = np.ones((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:] + vertices[:1]):
        # vertices run clockwise on screen; the interior lies on the non-negative side
        mask &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
    return mask


def circle_mask(size: int, center, radius: float) -> np.ndarray:
    xs, ys = pixel_centers(size)
    cx, cy = center
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def figure_mask(shape: str, cell: Rectangle, scale: float, size: int) -> np.ndarray:
    if shape not in CORNERS:
        raise ConfigurationError(f"Unknown shape {shape!r}")
    radius = scale * cell.extent
    if CORNERS[shape] == 0:
        return circle_mask(size, cell.center, radius)
    return polygon_mask(size, cell.center, radius, CORNERS[shape])


def paint(canvas: np.ndarray, mask: np.ndarray, level: int):
    canvas[mask] = level


def panel_mask(
    shape: str, scale: float, count: int, size: int = PANEL_SIZE
) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for cell in layout_cells(count, size):
        mask |= figure_mask(shape, cell, scale, size)
    return mask


def rasterize(
    shape: Optional[str] = None,
    scale: float = 0.0,
    level: int = 0,
    count: int = 0,
    size: int = PANEL_SIZE,
) -> np.ndarray:
    """
    8-bit grayscale panel: ``count`` filled figures of gray ``level`` on white, no
    antialiasing. A panel without a shape is blank.
    """
    canvas = np.full((size, size), WHITE, dtype=np.uint8)
    if shape is None or count == 0:
        return canvas
    if not 0 <= level < WHITE:
        raise ConfigurationError(f"Gray level {level} outside [0, {WHITE})")
    paint(canvas, panel_mask(shape, scale, count, size), level)
    return canvas


def to_unit(canvas: np.ndarray) -> np.ndarray:
    return canvas.astype(np.float64) / WHITE


def render_ascii(image: np.ndarray, step: int = 4) -> str:
    """
    Downsampled text rendering of one panel (values in [0, 1] or 8-bit).
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = to_unit(image)
    ramp = Shade.RAMP
    lines = []
    for y in range(0, image.shape[0], step):
        line = []
        for x in range(0, image.shape[1], step):
            value = float(image[y : y + step, x : x + step].mean())
            line.append(ramp[min(len(ramp) - 1, int(value * (len(ramp) - 1) + 0.5))])
        lines.append("".join(line).rstrip())
    return "\n".join(lines)


def render_strip(images: Sequence[np.ndarray], step: int = 4, gap: str = " | ") -> str:
    "Panels side by side."
    blocks = [render_ascii(image, step).splitlines() for image in images]
    width = max(len(line) for block in blocks for line in block) if blocks else 0
    rows = max(len(block) for block in blocks) if blocks else 0
    lines = []
    for row in range(rows):
        cells = [
            (block[row] if row < len(block) else "").ljust(width) for block in blocks
        ]
        lines.append(gap.join(cells).rstrip())
    return "\n".join(lines)


def _lookup(domain, index: int, attribute: str):
    if not 0 <= index < len(domain):
        raise ConfigurationError(
            f"{attribute} value {index} outside domain [0, {len(domain)})"
        )
    return domain[index]


def raster_panel(panel: Optional["Panel"], size: int = PANEL_SIZE) -> np.ndarray:
    "8-bit rendering of a symbolic panel; ``None`` is the blank panel."
    if panel is None:
        return rasterize(size=size)
    return rasterize(
        shape=_lookup(SHAPES, panel.type, "type"),
        scale=_lookup(SIZES, panel.size, "size"),
        level=_lookup(SHADES, panel.shade, "shade"),
        count=_lookup(COUNTS, panel.count, "count"),
        size=size,
    )


def render_panel(panel: Optional["Panel"], size: int = PANEL_SIZE) -> np.ndarray:
    return to_unit(raster_panel(panel, size))
