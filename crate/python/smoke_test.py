"""Smoke test for the `garment` extension module.

    pip install --no-build-isolation -e crates/python
    python3 -m pytest python/smoke_test.py
"""

import math
import random

import garment


def cloud(n, seed):
    rng = random.Random(seed)
    return [[rng.random(), rng.random(), rng.random()] for _ in range(n)]


def test_categories():
    cats = garment.categories()
    assert len(cats) == 10
    assert len(set(cats)) == 10


def test_metrics():
    a, b = cloud(40, 1), cloud(40, 2)
    assert garment.chamfer_distance(a, a) == 0.0
    assert garment.earth_movers_distance(a, a) == 0.0
    cd = garment.chamfer_distance(a, b)
    assert cd > 0.0 and math.isclose(cd, garment.chamfer_distance(b, a))
    assert garment.earth_movers_distance(a, b) > 0.0


def test_mesh_roundtrip(tmp_path):
    m = garment.Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert math.isclose(m.area(), 0.5)
    assert not m.is_watertight()
    m.write_obj(str(tmp_path / "t.obj"))
    faces = [l for l in (tmp_path / "t.obj").read_text().splitlines() if l.startswith("f ")]
    assert len(faces) == 1


def test_synthetic_garment_is_deterministic():
    cat = garment.categories()[0]
    a = garment.synthetic_garment(cat, seed=3)
    b = garment.synthetic_garment(cat, seed=3)
    assert a.vertices == b.vertices
    assert len(a.faces) > 0


def test_oracle_reconstruction_improves():
    meshes, cd = garment.reconstruct_oracle(garment.categories()[3], seed=1, resolution=48)
    names = [n for n, _ in meshes]
    assert names[:3] == ["m_t", "m_p", "m_l"]
    d = dict(cd)
    assert d["m_p"] >= d["m_l"] >= d["m_r"]


if __name__ == "__main__":
    import sys

    import pytest

    sys.exit(pytest.main([__file__, "-q"]))
