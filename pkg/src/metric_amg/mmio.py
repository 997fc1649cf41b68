"""Matrix Market coordinate files through :mod:`scipy.io`.

scipy writes shortest round-trip decimals, so stored values survive a
write/read cycle bit for bit.
"""

import scipy.io as sio

from .sparse import csr, is_symmetric


def write_mtx(path, A, symmetric=None, comment=None):
    A = csr(A)
    if symmetric is None:
        symmetric = A.shape[0] == A.shape[1] and is_symmetric(A, rtol=0.0)
    sio.mmwrite(str(path), A, comment=comment or "", field="real",
                symmetry="symmetric" if symmetric else "general")


def read_mtx(path):
    M = sio.mmread(str(path))
    if not hasattr(M, "tocsr"):
        raise ValueError(f"{path}: not a coordinate (sparse) Matrix Market file")
    return csr(M)
