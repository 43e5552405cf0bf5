import numpy as np
import pytest

from staf.core import gen_gaussian_sensing, gen_gaussian_signal, measure
from staf.io import from_json, load_binary, save_binary, to_json


def _objects(fld):
    ens = gen_gaussian_sensing(7, 4, fld, 0)
    x = gen_gaussian_signal(4, fld, 1)
    return [x, ens, measure(ens, x, 0.05, np.random.SeedSequence(3))]


def _same(a, b):
    assert type(a) is type(b)
    for name in ("entries", "rows", "psi"):
        if hasattr(a, name):
            va, vb = getattr(a, name), getattr(b, name)
            assert va.dtype == vb.dtype
            np.testing.assert_array_equal(va, vb)
    if hasattr(a, "noise_sigma"):
        assert a.noise_sigma == b.noise_sigma
        assert a.seed_meta == b.seed_meta


@pytest.mark.parametrize("fld", ["real", "complex"])
def test_binary_round_trip(tmp_path, fld):
    for i, obj in enumerate(_objects(fld)):
        path = tmp_path / f"obj{i}.bin"
        save_binary(obj, path)
        _same(obj, load_binary(path))


@pytest.mark.parametrize("fld", ["real", "complex"])
def test_json_round_trip(fld):
    for obj in _objects(fld):
        _same(obj, from_json(to_json(obj)))


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a container")
    with pytest.raises(ValueError):
        load_binary(p)


def test_unsupported_object():
    with pytest.raises(TypeError):
        to_json(np.ones(3))
