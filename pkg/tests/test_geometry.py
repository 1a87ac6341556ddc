import numpy as np
import pytest

from nnbarrier.geometry import (
    Box,
    SemiAlgebraicSet,
    box_to_polynomials,
    contains,
    contains_batch,
    partition_uniform,
    unsafe_decomposition,
)
from nnbarrier.poly import ArityError


def test_partition_counts():
    assert len(partition_uniform(Box([0, 0], [1, 1]), [0.5, 0.5])) == 4
    p = partition_uniform(Box([0], [1]), [0.3])
    assert len(p) == 4
    assert p[3].lower[0] == pytest.approx(0.9) and p[3].upper[0] == 1.0
    assert sum(float(r.widths[0]) for r in p) == pytest.approx(1.0)
    assert len(partition_uniform(Box([-1, -1], [1, 1]), [0.25, 0.5])) == 32


def test_pendulum_widths_give_480():
    th = np.pi / 15
    assert len(partition_uniform(Box([-th, -1], [th, 1]), [0.01745329, 0.1])) == 480


def test_partition_errors():
    with pytest.raises(ValueError):
        partition_uniform(Box([0], [0]), [0.1])
    with pytest.raises(ValueError):
        partition_uniform(Box([0], [1]), [0.0])


def test_partition_tiles_and_locates():
    box = Box([-1, 0], [1, 0.7])
    part = partition_uniform(box, [0.3, 0.25])
    assert sum(np.prod(r.widths) for r in part) == pytest.approx(np.prod(box.widths))
    pts = box.sample(np.random.default_rng(0), 5000)
    ids = part.locate(pts)
    assert np.all(ids >= 0)
    for x, q in zip(pts[:500], ids[:500]):
        r = part[q]
        assert np.all(x >= r.lower) and np.all(x <= r.upper)
        owners = [i for i, rr in enumerate(part) if np.all(x >= rr.lower) and np.all(x < rr.upper)]
        assert owners in ([q], [])
    # the global upper face is closed
    assert part.locate([[1.0, 0.7]])[0] == len(part) - 1
    assert part.locate([[1.5, 0.1]])[0] == -1


def test_partition_lexicographic_order():
    part = partition_uniform(Box([0, 0], [1, 1]), [0.5, 0.5])
    assert [tuple(r.lower) for r in part] == [(0, 0), (0, 0.5), (0.5, 0), (0.5, 0.5)]


def test_partition_csv():
    text = partition_uniform(Box([0], [1]), [0.5]).to_csv().splitlines()
    assert text[0] == "region_id,l_1,u_1"
    assert text[2] == "1,0.5,1.0"


def test_box_to_polynomials():
    (h,) = box_to_polynomials(Box([0], [1])).constraints
    assert h.eval([0.5]) == pytest.approx(0.25)
    hs = box_to_polynomials(Box([-1, -1], [1, 1])).constraints
    assert len(hs) == 2 and hs[0].eval([0.0, 5.0]) == pytest.approx(1.0)
    (h,) = box_to_polynomials(Box([0.4], [0.6])).constraints
    assert h.eval([0.5]) == pytest.approx(0.01)
    assert h.eval([0.3]) == pytest.approx(-0.03)


def test_unsafe_decomposition():
    slabs = unsafe_decomposition(Box([-2], [2]), Box([-1], [1]))
    assert len(slabs) == 2
    assert all(len(s) == 1 and s.constraints[0].degree == 1 for s in slabs)
    slabs2 = unsafe_decomposition(Box([-2, -2], [2, 2]), Box([-1, -1], [1, 1]))
    assert len(slabs2) == 4
    members = [contains(s, [1.5, 0.0]) for s in slabs2]
    assert sum(members) == 1
    # safe box and slabs cover the state space
    pts = Box([-2, -2], [2, 2]).sample(np.random.default_rng(1), 5000)
    covered = contains_batch(Box([-1, -1], [1, 1]), pts)
    for s in slabs2:
        covered |= contains_batch(s, pts)
    assert covered.all()


def test_contains():
    b = Box([0], [1])
    assert contains(b, [0.0])
    assert not contains(b, [-1e-12])
    with pytest.raises(ArityError):
        contains(b, [0.0, 1.0])
    pts = np.random.default_rng(2).uniform(-1, 2, size=(10_000, 1))
    sa = box_to_polynomials(b)
    assert np.array_equal(contains_batch(b, pts), contains_batch(sa, pts))


def test_semialgebraic_arity_checked():
    (h,) = box_to_polynomials(Box([0], [1])).constraints
    with pytest.raises(ArityError):
        SemiAlgebraicSet((h,), 2)


def test_box_validation():
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
