import numpy as np
import scipy.sparse as sp
from hypothesis import given, strategies as st

from metric_amg.assembly import ProblemSpec, build_system
from metric_amg.mmio import read_mtx, write_mtx
from metric_amg.sparse import csr

floats = st.floats(allow_nan=False, allow_infinity=False, width=64).filter(lambda x: x != 0)


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 4), floats), min_size=1, max_size=30))
def test_general_roundtrip_is_bit_exact(tmp_path_factory, entries):
    rows, cols, vals = zip(*entries)
    A = csr((vals, (rows, cols)), shape=(8, 5))
    A.eliminate_zeros()
    path = tmp_path_factory.mktemp("mtx") / "a.mtx"
    write_mtx(path, A)
    B = read_mtx(path)
    assert B.shape == A.shape
    assert np.array_equal(B.indptr, A.indptr) and np.array_equal(B.indices, A.indices)
    assert np.array_equal(B.data.view(np.int64), A.data.view(np.int64))


def test_symmetric_roundtrip_stores_lower_triangle(tmp_path):
    A = build_system(ProblemSpec(model="emi", dim=2, n=4, gamma=3.0)).A
    path = tmp_path / "a.mtx"
    write_mtx(path, A, comment="emi test matrix")
    text = path.read_text()
    assert text.startswith("%%MatrixMarket matrix coordinate real symmetric")
    assert int(text.split("\n")[2].split()[2]) == sp.tril(A).nnz
    B = read_mtx(path)
    assert (A != B).nnz == 0


def test_export_writes_all_operators(tmp_path):
    s = build_system(ProblemSpec(model="bidomain", dim=2, n=3))
    s.export(tmp_path)
    for name in ("A", "A0", "A1", "R"):
        assert (read_mtx(tmp_path / f"{name}.mtx") != getattr(s, name)).nnz == 0
