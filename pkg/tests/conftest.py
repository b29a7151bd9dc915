import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from textmaploc import vocab
from textmaploc.geodata import GeoPoint, MapElement, landmark_city, to_geopoint
from textmaploc.tiler import Cropper, TileRaster, TileSpec, rasterize

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def node(name, x, y):
    return MapElement(vocab.by_name(name), np.array([[x, y]], dtype=float))


def box(name, x0, y0, x1, y1):
    return MapElement(vocab.by_name(name),
                      np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def tile_of(elements, tile_id="t0", center_xy=(0.0, 0.0), spec=TileSpec()):
    return rasterize(elements, spec, center=GeoPoint(1.3, 103.8), center_xy=center_xy,
                     tile_id=tile_id)


def random_raster(rng, spec=TileSpec(), n_buildings=6, n_nodes=25, tile_id="r"):
    """Random raster built straight from numpy: building rectangles plus scattered ids."""
    P = spec.P
    ch = np.zeros((3, P, P), dtype=np.uint8)
    areas = vocab.classes_of_kind("area")
    ways = vocab.classes_of_kind("way")
    nodes = vocab.classes_of_kind("node")
    for _ in range(int(rng.integers(0, 4))):
        r0, c0 = rng.integers(0, P - 20, size=2)
        h, w = rng.integers(4, 60, size=2)
        ch[2, r0:r0 + h, c0:c0 + w] = areas[int(rng.integers(1, len(areas)))].id
    for _ in range(n_buildings):
        r0, c0 = rng.integers(0, P - 4, size=2)
        h, w = rng.integers(2, 40, size=2)
        ch[2, r0:r0 + h, c0:c0 + w] = vocab.BUILDING.id
    for _ in range(4):
        r = int(rng.integers(0, P))
        ch[1, r, :] = ways[int(rng.integers(len(ways)))].id
    for _ in range(n_nodes):
        r, c = rng.integers(0, P - 2, size=2)
        ch[0, r:r + 2, c:c + 2] = nodes[int(rng.integers(len(nodes)))].id
    return TileRaster(spec, ch, GeoPoint(0.0, 0.0), (0.0, 0.0), tile_id)


def landmark_tiles(n_sites, seed=0, spec=TileSpec()):
    """One rasterized tile per landmark-city site, centered on the site."""
    elements, centers = landmark_city(n_sites, seed=seed)
    cropper = Cropper(elements)
    return [rasterize(cropper.crop(c, spec), spec, center=to_geopoint(c, elements.origin),
                      center_xy=(float(c[0]), float(c[1])), tile_id=f"site_{i:04d}")
            for i, c in enumerate(centers)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed or rep.skipped):
        number, title = mark.args
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        verdict = "FAIL" if rep.failed or prev == "FAIL" else ("SKIP" if rep.skipped else prev)
        _CRITERIA[number] = (title, verdict)
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
