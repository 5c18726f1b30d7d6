import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvqmark.channel import PlantedChannel, apply_channel
from rvqmark.core import TokenStream, token_match
from rvqmark.errors import DataFormatError, ShapeError
from rvqmark.graph import (ConfusionMatrix, WeightedDigraph, build_confusion, read_confusion_csv,
                           to_graph, write_confusion_csv)


def ts(*cols, vocab=10):
    return TokenStream(np.array(cols).T, (vocab,) * len(cols))


def test_identical_streams_give_empty_matrix():
    x = ts([1, 2, 3, 3])
    (m,) = build_confusion([(x, x)])
    assert m.nnz == 0 and m.total == 0


def test_single_pair_single_entry():
    (m,) = build_confusion([(ts([1, 2, 3]), ts([1, 5, 3]))])
    assert m.to_dict() == {(2, 5): 1}


def test_empty_pair_list_needs_vocab():
    with pytest.raises(ShapeError):
        build_confusion([])
    (m,) = build_confusion([], vocab_sizes=(7,))
    assert m.vocab_size == 7 and m.nnz == 0


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        build_confusion([(ts([1, 2, 3]), ts([1, 2]))])


def test_multichannel_confusion_is_per_channel():
    x = ts([1, 2, 3], [4, 4, 4])
    y = ts([1, 3, 3], [4, 0, 0])
    m0, m1 = build_confusion([(x, y)])
    assert m0.to_dict() == {(2, 3): 1}
    assert m1.to_dict() == {(4, 0): 2}


def test_planted_confusion_mass_inside_clusters(rng):
    ch = PlantedChannel.blocks(2048, 32, 0.8, 0.9)
    x = TokenStream(rng.integers(0, 2048, size=(100_000, 1)), (2048,))
    (m,) = build_confusion([(x, apply_channel(x, ch, 8))])
    inside = m.count[m.src // 32 == m.dst // 32].sum() / m.total
    expect = 0.9 + 0.1 * 31 / 2047
    assert abs(inside - expect) <= 3 * math.sqrt(expect * (1 - expect) / m.total)


def test_threshold_filter_examples():
    m = ConfusionMatrix(0, 10, [2, 7], [5, 8], [3, 1])
    g1 = to_graph(m, 1)
    assert g1.to_dict() == {(2, 5): 3.0, (7, 8): 1.0}
    assert to_graph(m, 2).to_dict() == {(2, 5): 3.0}
    assert to_graph(m, 2).node_count == 10          # isolated nodes stay
    with pytest.raises(ValueError):
        to_graph(m, 0)


def test_threshold_removes_inter_cluster_mass(rng):
    ch = PlantedChannel.blocks(512, 16, 0.8, 0.9)
    x = TokenStream(rng.integers(0, 512, size=(100_000, 1)), (512,))
    (m,) = build_confusion([(x, apply_channel(x, ch, 3))])

    def inter(g):
        return g.weight[g.src // 16 != g.dst // 16].sum()

    assert inter(to_graph(m, 10)) < inter(to_graph(m, 1))


def test_total_weight_equals_mismatch_count(rng):
    ch = PlantedChannel.blocks(64, 8, 0.7, 0.5)
    pairs = []
    for t in range(5):
        x = TokenStream(rng.integers(0, 64, size=(300, 1)), (64,))
        pairs.append((x, apply_channel(x, ch, t)))
    (m,) = build_confusion(pairs)
    mismatches = sum(round(300 * (1 - token_match(x, y)[1])) for x, y in pairs)
    assert to_graph(m, 1).total_weight == mismatches == m.total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_confusion_is_additive(seed, n_sets):
    rng = np.random.default_rng(seed)
    datasets = []
    for _ in range(n_sets):
        n = int(rng.integers(0, 30))
        x = TokenStream(rng.integers(0, 6, size=(n, 2)), (6, 6))
        y = TokenStream(rng.integers(0, 6, size=(n, 2)), (6, 6))
        datasets.append([(x, y)])
    whole = build_confusion([p for d in datasets for p in d])
    parts = [build_confusion(d) for d in datasets]
    for c in range(2):
        acc = parts[0][c]
        for p in parts[1:]:
            acc = acc + p[c]
        assert acc == whole[c]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_arc_set_is_antitone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, 12, size=60)
    dst = rng.integers(0, 12, size=60)
    m = ConfusionMatrix.from_pairs(0, 12, src, dst, rng.integers(1, 6, size=60))
    prev = None
    for thr in range(1, 8):
        arcs = set(to_graph(m, thr).to_dict())
        if prev is not None:
            assert arcs <= prev
        prev = arcs


def test_matrix_invariants_enforced():
    with pytest.raises(ShapeError):
        ConfusionMatrix(0, 5, [1], [1], [2])
    with pytest.raises(ShapeError):
        ConfusionMatrix(0, 5, [1], [2], [0])
    with pytest.raises(ShapeError):
        ConfusionMatrix(0, 5, [2, 1], [3, 2], [1, 1])
    with pytest.raises(ShapeError):
        WeightedDigraph(3, [0], [0], [1.0], 0.0)
    with pytest.raises(ShapeError):
        WeightedDigraph(3, [0], [1], [-1.0], 0.0)


def test_digraph_total_is_exact_sum():
    g = WeightedDigraph.from_arcs(4, [(0, 1, 0.1), (1, 2, 0.2), (0, 1, 0.3), (2, 3, 1e-17)])
    assert g.total_weight == math.fsum([0.4, 0.2, 1e-17])
    assert g.to_dict()[(0, 1)] == pytest.approx(0.4)


def test_confusion_csv_round_trip_is_bit_exact(tmp_path, rng):
    mats = [ConfusionMatrix.from_pairs(c, 40, rng.integers(0, 40, 200), rng.integers(0, 40, 200)) for c in range(3)]
    path = tmp_path / "conf.csv"
    write_confusion_csv(path, mats)
    text = path.read_text()
    assert text.splitlines()[0] == "channel,src,dst,count"
    back = read_confusion_csv(path, (40, 40, 40))
    assert back == mats
    write_confusion_csv(tmp_path / "again.csv", back)
    assert (tmp_path / "again.csv").read_text() == text


def test_empty_confusion_csv_is_header_only(tmp_path):
    buf = io.StringIO()
    write_confusion_csv(buf, [])
    assert buf.getvalue() == "channel,src,dst,count\n"


@pytest.mark.parametrize("body,line", [
    ("0,1,2,3\n0,1,x,3\n", 3),
    ("0,1,2,3\n0,1,2\n", 3),
    ("0,2,1,3\n0,1,2,3\n", 3),
    ("0,1,1,3\n", 2),
    ("0,1,2,0\n", 2),
])
def test_malformed_confusion_csv_reports_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text("channel,src,dst,count\n" + body)
    with pytest.raises(DataFormatError) as err:
        read_confusion_csv(path, (10,))
    assert err.value.line == line
    assert f":{line}" in str(err.value)
