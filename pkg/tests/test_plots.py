import xml.etree.ElementTree as ET

import numpy as np

from stlplan.plots import PlotSpec, _ticks, line_chart_svg, plan_svg
from stlplan.sdf import OccupancyMask

NS = "{http://www.w3.org/2000/svg}"


def _grid():
    g = np.zeros((10, 10), bool)
    g[0, 2:5] = True     # one run in the top row
    g[9, 0] = True       # bottom-left pixel
    return OccupancyMask(g, extent=(1.0, 1.0))


def test_plan_svg_parses_and_places_obstacles():
    spec = PlotSpec(_grid(), waypoints=[np.array([[0.1, 0.1], [0.5, 0.9]])],
                    traces=[np.array([[0.1, 0.1, 0.0], [0.4, 0.8, 1.0]])],
                    regions={"A": ((0.5, 0.5), 0.1)}, title="a < b & c")
    root = ET.fromstring(plan_svg(spec, size=100))
    rects = [r for r in root.iter(NS + "rect") if r.get("fill") == "#777"]
    assert len(rects) == 2
    top = next(r for r in rects if float(r.get("width")) > 20)
    # top-row run covers columns 2..4, drawn at the top of the canvas
    assert np.isclose(float(top.get("x")), 20) and np.isclose(float(top.get("y")), 0)
    assert np.isclose(float(top.get("width")), 30)
    corner = next(r for r in rects if r is not top)
    assert np.isclose(float(corner.get("x")), 0) and np.isclose(float(corner.get("y")), 90)
    circles = list(root.iter(NS + "circle"))
    assert len(circles) == 1 + 2
    # y axis flipped: waypoint at y=0.9 lands near the top
    assert any(np.isclose(float(c.get("cy")), 10) for c in circles)
    assert "a &lt; b &amp; c" in plan_svg(spec)


def test_line_chart_drops_nan_and_handles_empty():
    svg = line_chart_svg({"a": ([0, 1, 2], [0.1, float("nan"), 0.3]), "b": ([], [])}, "t", "x", "y")
    root = ET.fromstring(svg)
    lines = list(root.iter(NS + "polyline"))
    assert len(lines) == 1 and len(lines[0].get("points").split()) == 2
    ET.fromstring(line_chart_svg({}))
    ET.fromstring(line_chart_svg({"c": ([1], [5.0])}))


def test_ticks_cover_range():
    t = _ticks(0.0, 1.0)
    assert t[0] == 0.0 and t[-1] <= 1.0 + 1e-12 and len(t) >= 3
    assert _ticks(3.0, 3.0)
