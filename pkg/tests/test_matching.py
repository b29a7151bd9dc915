import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from textmaploc import vocab
from textmaploc.matching import (
    BLOCK, DIM, IndexFormatError, TileIndex, TileRetriever, build_index, cosine, decode_index,
    encode_index, encode_text, encode_tile, load_index, retrieve, save_index,
)
from textmaploc.textgen import Hint, rarity_weights, render_hints
from textmaploc.visibility import DIRECTIONS, PolarSpec

from conftest import node, random_raster, tile_of

T, N, S, W, E = DIRECTIONS
POLAR = PolarSpec()
BUS = vocab.by_name("bus stop")


def _none():
    return [Hint(d) for d in DIRECTIONS]


def test_dimensions():
    assert DIM == 245 and BLOCK == 49


def test_encode_text_examples():
    assert not encode_text(_none()).any()
    hints = _none()
    hints[1] = Hint(N, BUS)
    vec = encode_text(hints)
    assert np.flatnonzero(vec).tolist() == [1 * 49 + BUS.id - 1]
    assert vec.max() == 1.0
    assert np.array_equal(encode_text(hints), encode_text(list(hints)))


def test_encode_text_rejects_duplicates():
    with pytest.raises(ValueError):
        encode_text([Hint(N, BUS), Hint(N, None)])


@given(st.lists(st.one_of(st.none(), st.sampled_from(vocab.CLASSES)), min_size=5, max_size=5),
       st.permutations(range(5)))
def test_block_permutation(classes, perm):
    hints = [Hint(d, c) for d, c in zip(DIRECTIONS, classes)]
    order = "".join("TNSWE"[i] for i in perm)
    base = encode_text(hints).reshape(5, BLOCK)
    moved = encode_text(hints, order).reshape(5, BLOCK)
    for slot, d in enumerate(perm):
        assert np.array_equal(moved[slot], base[d])


def test_encode_tile_examples():
    idf = np.ones(vocab.N_IDS)
    assert not encode_tile(tile_of([]), POLAR, idf).any()
    t = tile_of([node("bus stop", 0.0, 10.0)])
    vec = encode_tile(t, POLAR, idf)
    assert np.flatnonzero(vec).tolist() == [49 + BUS.id - 1]
    assert np.array_equal(vec, encode_tile(t, POLAR, idf))


def test_encode_tile_blocks_are_unit_or_zero(rng):
    t = random_raster(rng)
    idf = rarity_weights([t, random_raster(rng), tile_of([])])
    blocks = encode_tile(t, POLAR, idf).reshape(5, BLOCK).astype(np.float64)
    for b in blocks:
        n = np.linalg.norm(b)
        assert n == 0 or n == pytest.approx(1.0, abs=1e-6)


def test_cosine_examples():
    a = np.zeros(DIM)
    a[3] = 2.0
    b = np.zeros(DIM)
    b[60] = 1.0
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, b) == 0.0
    assert cosine(np.zeros(DIM), a) == 0.0
    with pytest.raises(ValueError):
        cosine(np.ones(3), np.ones(4))


@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.lists(st.floats(-5, 5), min_size=8, max_size=8),
       st.floats(0.01, 100))
def test_cosine_symmetry_and_scale(a, b, lam):
    a, b = np.array(a), np.array(b)
    assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-12)
    assert cosine(lam * a, b) == pytest.approx(cosine(a, b), abs=1e-9)
    assert -1.0 <= cosine(a, b) <= 1.0


def _three_tiles():
    return [tile_of([node("bus stop", 0, 10), node("tree", 0, 0)], "t2", (60.0, 0.0)),
            tile_of([node("bench", 10, 0), node("tree", 0, 0)], "t1", (0.0, 0.0)),
            tile_of([node("clock", -10, 0), node("tree", 0, 0)], "t3", (120.0, 0.0))]


def test_build_index_examples():
    idx = build_index(_three_tiles(), POLAR)
    assert len(idx) == 3 and idx.descriptors.shape == (3, DIM)
    assert idx.tile_ids == ["t1", "t2", "t3"]
    tree = vocab.by_name("tree").id
    assert idx.idf[tree] == 0.0  # log(3/4) floored
    assert idx.idf[BUS.id] == pytest.approx(math.log(3 / 2))
    assert encode_index(idx) == encode_index(build_index(_three_tiles(), POLAR))


def test_build_index_rejects_duplicate_ids():
    tiles = _three_tiles()
    tiles[2].tile_id = "t1"
    with pytest.raises(ValueError, match="t1"):
        build_index(tiles, POLAR)


def test_retrieve_examples():
    idx = build_index(_three_tiles(), POLAR)
    q = idx.descriptors[idx.row_of("t2")]
    ranked = retrieve(idx, q, 2)
    sims = [cosine(q, d) for d in idx.descriptors]
    assert ranked[0] == ("t2", pytest.approx(1.0))
    assert ranked[0][0] == idx.tile_ids[int(np.argmax(sims))]
    assert len(retrieve(idx, q, 10)) == 3
    with pytest.raises(ValueError):
        retrieve(idx, q, 0)


def test_retrieve_ties_by_tile_id():
    desc = np.zeros((3, DIM), dtype=np.float32)
    desc[:, 5] = 1.0
    idx = TileIndex(desc, ["a", "b", "c"], np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(vocab.N_IDS))
    assert [t for t, _ in retrieve(idx, desc[0], 3)] == ["a", "b", "c"]


def test_retrieve_matches_full_sort_oracle():
    g = np.random.default_rng(7)
    Z = 10_000
    desc = (g.random((Z, DIM)) * (g.random((Z, DIM)) < 0.03)).astype(np.float32)
    ids = [f"z{i:05d}" for i in range(Z)]
    idx = TileIndex(desc, ids, np.zeros((Z, 2)), np.zeros((Z, 2)), np.zeros(vocab.N_IDS))
    unit = desc.astype(np.float64)
    norms = np.linalg.norm(unit, axis=1)
    for _ in range(1000):
        q = g.random(DIM) * (g.random(DIM) < 0.05)
        got = retrieve(idx, q, 5)
        nq = np.linalg.norm(q)
        s = np.where(norms > 0, unit @ q / np.where(norms > 0, norms, 1) / (nq or 1), 0.0)
        want = np.lexsort((np.arange(Z), -s))[:5]  # ids sort like row numbers
        # orders may differ only among scores equal to rounding error
        assert [sc for _, sc in got] == pytest.approx([s[i] for i in want], abs=1e-12)
        for t, sc in got:
            assert s[int(t[1:])] == pytest.approx(sc, abs=1e-12)


def test_scaling_descriptors_keeps_ranking(rng):
    idx = build_index([random_raster(rng, tile_id=f"r{i}") for i in range(6)], POLAR)
    q = idx.descriptors[2] + 0.1
    base = retrieve(idx, q, 6)
    scaled = TileIndex(idx.descriptors * np.arange(1, 7, dtype=np.float32)[:, None], idx.tile_ids,
                       idx.centers_latlon, idx.centers_xy, idx.idf)
    assert [t for t, _ in retrieve(scaled, q, 6)] == [t for t, _ in base]


def test_index_file_round_trip(tmp_path):
    idx = build_index(_three_tiles(), POLAR, config={"note": "x"})
    data = encode_index(idx)
    magic, version, Z, dim = struct.unpack_from("<4sBII", data)
    assert (magic, version, Z, dim) == (b"TOLI", 1, 3, 245)
    save_index(idx, tmp_path / "i.toli")
    back = load_index(tmp_path / "i.toli")
    assert np.array_equal(back.descriptors, idx.descriptors)
    assert back.tile_ids == idx.tile_ids and np.array_equal(back.idf, idx.idf)
    assert back.config["note"] == "x" and back.config["order"] == "TNSWE"
    assert np.array_equal(back.centers_xy, idx.centers_xy)
    assert encode_index(back) == data


def test_index_format_errors():
    data = encode_index(build_index(_three_tiles(), POLAR))
    for bad in (b"XXXX" + data[4:], data[:4] + b"\x07" + data[5:], data[:20], data[:100]):
        with pytest.raises(IndexFormatError):
            decode_index(bad)


def test_retriever_estimator_api():
    tiles = _three_tiles()
    est = TileRetriever(n_candidates=2)
    assert est.get_params() == {"n_candidates": 2, "V": 360, "sigma": 3.0, "order": "TNSWE"}
    assert clone(est).get_params() == est.get_params()
    est.fit(tiles)
    hints = _none()
    hints[1] = Hint(N, BUS)
    X = est.transform([hints])
    assert X.shape == (1, DIM)
    assert est.predict([hints]).tolist() == ["t2"]
    assert est.predict([render_hints(hints)]).tolist() == ["t2"]
    assert est.decision_function([hints]).shape == (1, 3)
    assert len(est.kneighbors([hints])[0]) == 2
    again = TileRetriever.from_index(est.index_)
    assert again.predict([hints]).tolist() == ["t2"]
    with pytest.raises(ValueError):
        TileRetriever(order="TNSEX").fit(tiles)
