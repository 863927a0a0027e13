import dataclasses
from typing import List

from .exceptions import ConfigurationError


@dataclasses.dataclass
class EdgeSizes:
    left: float = 0.0
    right: float = 0.0
    top: float = 0.0
    bottom: float = 0.0


@dataclasses.dataclass
class Rectangle:
    x: float = 0.0
    y: float = 0.0
    width: float = 0.0
    height: float = 0.0

    def expanded_by(self, edge: EdgeSizes) -> "Rectangle":
        return dataclasses.replace(
            self,
            x=self.x - edge.left,
            y=self.y - edge.top,
            width=self.width + edge.left + edge.right,
            height=self.height + edge.top + edge.bottom,
        )

    def inset_by(self, edge: EdgeSizes) -> "Rectangle":
        return self.expanded_by(
            EdgeSizes(-edge.left, -edge.right, -edge.top, -edge.bottom)
        )

    def split(self, columns: int, rows: int) -> List["Rectangle"]:
        "Row-major grid of equal cells."
        width, height = self.width / columns, self.height / rows
        return [
            Rectangle(self.x + column * width, self.y + row * height, width, height)
            for row in range(rows)
            for column in range(columns)
        ]

    @property
    def center(self):
        return self.x + self.width / 2, self.y + self.height / 2

    @property
    def extent(self) -> float:
        "Half of the shorter side: the largest radius that fits."
        return min(self.width, self.height) / 2


def panel_box(size: int, margin: float) -> Rectangle:
    return Rectangle(width=size, height=size).inset_by(
        EdgeSizes(margin, margin, margin, margin)
    )


def layout_cells(count: int, size: int, margin: float = 4.0) -> List[Rectangle]:
    """
    Fixed placement of ``count`` figures in a square panel: one centered figure, a
    left/right pair, a triangle of three or a 2x2 grid.
    """
    box = panel_box(size, margin)
    if count == 1:
        return [box]
    if count == 2:
        return box.split(2, 1)
    quadrants = box.split(2, 2)
    if count == 3:
        top = dataclasses.replace(quadrants[0], x=box.x + box.width / 4)
        return [top, quadrants[2], quadrants[3]]
    if count == 4:
        return quadrants
    raise ConfigurationError(f"No cell layout for {count} figures")
