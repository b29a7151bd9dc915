import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from textmaploc import TextToMapLocalizer
from textmaploc.matching import build_index
from textmaploc.textgen import derive_seed, generate_query, render_hints

from conftest import landmark_tiles


@pytest.fixture(scope="module")
def city():
    tiles = landmark_tiles(16, seed=2)
    loc = TextToMapLocalizer(n_candidates=5).fit(tiles)
    w = loc.index_.idf
    records = [generate_query(t, w, derive_seed(9, i), query_id=f"q{i}") for i, t in enumerate(tiles)]
    return tiles, loc, records


def test_params_and_clone():
    est = TextToMapLocalizer(n_candidates=3, stride=2.0)
    params = est.get_params()
    assert params["n_candidates"] == 3 and params["order"] == "TNSWE"
    assert clone(est).get_params() == params
    with pytest.raises(NotFittedError):
        est.localize(["x"] * 5)


def test_localize_record_and_sentences_agree(city):
    tiles, loc, records = city
    a = loc.localize(records[3])
    b = loc.localize(render_hints(records[3].hints))
    assert a == b
    assert len(a.ranked) == 5
    assert a.ranked[0][0] == tiles[3].tile_id
    doc = a.to_dict()
    assert list(doc) == ["ranked", "offset", "position_xy", "position_latlon", "pose_score"]
    json.dumps(doc)
    assert len(loc.localize(records[3], n_candidates=2).ranked) == 2


def test_predict_and_score(city):
    tiles, loc, records = city
    pred = loc.predict(records)
    assert pred.shape == (len(records), 2)
    truth = np.array([np.add(t.center_xy, r.position_local) for t, r in zip(tiles, records)])
    assert np.abs(pred - truth).max() <= 1.0
    assert loc.score(records) == 1.0


def test_evaluate_pairs_truth(city):
    tiles, loc, records = city
    results = loc.evaluate(records[:4])
    for t, r, res in zip(tiles, records, results):
        assert res.query_id == r.query_id
        assert res.truth_xy == (t.center_xy[0] + r.position_local[0], t.center_xy[1] + r.position_local[1])
        assert res.error <= 1.0
        assert res.ranked[0].center_xy == t.center_xy


def test_from_index_matches_fit(city):
    tiles, loc, records = city
    other = TextToMapLocalizer.from_index(build_index(tiles), tiles, n_candidates=5)
    assert np.array_equal(other.predict(records), loc.predict(records))
    with pytest.raises(ValueError, match="no raster"):
        TextToMapLocalizer.from_index(build_index(tiles), tiles[1:])


def test_bad_query_shapes(city):
    _, loc, _ = city
    with pytest.raises(TypeError):
        loc.localize("On top of a tree.")
    with pytest.raises(ValueError):
        loc.localize(["The pose is on top of tree."])
