"""Standard-form semidefinite programming: owned solver, checker, SDPA text I/O.

Problems are stated in primal standard form over a product of PSD blocks X:

    optimize  tr(C X)   subject to   tr(A_i X) = b_i,   X >= 0.

``solve`` runs an infeasible-start primal-dual interior-point method with
NT scaling and a Mehrotra-style predictor-corrector.  Equality constraints
are first eliminated by a presolve (single-entry pins, two-entry
substitutions, then an SVD nullspace of the residual rows), which is cached
per constraint structure so parameter sweeps that only change right-hand
sides or objectives pay for it once.  Solutions are lifted back to the
original constraint list, so reported residuals and duals always refer to
the problem as given.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import lsqr

Entry = tuple[int, int, int, float]  # (block, i, j, value), i <= j, symmetric matrix


class SdpaParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _normalize_entries(entries, blocks, what: str) -> tuple[Entry, ...]:
    """Fold to upper triangle, check symmetry/finiteness, sort canonically."""
    folded: dict[tuple[int, int, int], float] = {}
    for blk, i, j, val in entries:
        blk, i, j, val = int(blk), int(i), int(j), float(val)
        if not 0 <= blk < len(blocks):
            raise ValueError(f"{what}: block index {blk} out of range")
        nb = blocks[blk]
        if not (0 <= i < nb and 0 <= j < nb):
            raise ValueError(f"{what}: entry ({i},{j}) outside block of size {nb}")
        if not np.isfinite(val):
            raise ValueError(f"{what}: non-finite value")
        key = (blk, i, j) if i <= j else (blk, j, i)
        if key in folded:
            if folded[key] != val:
                raise ValueError(
                    f"{what}: non-symmetric data at block {blk} entry ({i},{j})"
                )
            continue
        folded[key] = val
    return tuple(
        (blk, i, j, v) for (blk, i, j), v in sorted(folded.items()) if v != 0.0
    )


@dataclass(frozen=True)
class SdpProblem:
    """Primal standard-form SDP over a product of PSD blocks."""

    blocks: tuple[int, ...]
    constraints: tuple[tuple[tuple[Entry, ...], float], ...]
    objective: tuple[Entry, ...]
    sense: str  # "max" | "min"

    def __post_init__(self):
        if self.sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        blocks = tuple(int(b) for b in self.blocks)
        if not blocks or any(b < 1 for b in blocks):
            raise ValueError("blocks must be positive sizes")
        object.__setattr__(self, "blocks", blocks)
        cons = []
        for idx, (entries, rhs) in enumerate(self.constraints):
            rhs = float(rhs)
            if not np.isfinite(rhs):
                raise ValueError(f"constraint {idx}: non-finite rhs")
            cons.append((_normalize_entries(entries, blocks, f"constraint {idx}"), rhs))
        object.__setattr__(self, "constraints", tuple(cons))
        object.__setattr__(
            self, "objective", _normalize_entries(self.objective, blocks, "objective")
        )

    @property
    def m(self) -> int:
        return len(self.constraints)


@dataclass
class SdpSolution:
    primal_blocks: list[np.ndarray]
    dual: np.ndarray
    status: str  # optimal | infeasible | unbounded | max_iterations | numerical_failure
    objective: float
    residuals: dict
    iterations: int


# ---------------------------------------------------------------------------
# svec coordinates: symmetric matrices <-> vectors with <A,B> = a.b
# ---------------------------------------------------------------------------

_SQRT2 = float(np.sqrt(2.0))


class _Layout:
    """svec coordinate layout over the block product."""

    def __init__(self, blocks: tuple[int, ...]):
        self.blocks = blocks
        self.offsets = []
        off = 0
        for nb in blocks:
            self.offsets.append(off)
            off += nb * (nb + 1) // 2
        self.dim = off
        self.dense = [(b, nb, self.offsets[b]) for b, nb in enumerate(blocks) if nb > 1]
        self.diag_idx = np.array(
            [self.offsets[b] for b, nb in enumerate(blocks) if nb == 1], dtype=int
        )
        self._tri = {}
        for nb in set(blocks):
            iu = np.triu_indices(nb)
            scale = np.where(iu[0] == iu[1], 1.0, _SQRT2)
            self._tri[nb] = (iu, scale)

    def coord(self, blk: int, i: int, j: int) -> int:
        nb = self.blocks[blk]
        return self.offsets[blk] + i * nb - i * (i - 1) // 2 + (j - i)

    def entry_scale(self, i: int, j: int) -> float:
        return 1.0 if i == j else _SQRT2

    def vec_to_mats(self, x: np.ndarray) -> list[np.ndarray]:
        mats = []
        for b, nb in enumerate(self.blocks):
            iu, scale = self._tri[nb]
            seg = x[self.offsets[b]: self.offsets[b] + nb * (nb + 1) // 2]
            M = np.zeros((nb, nb))
            M[iu] = seg / scale
            M = M + M.T - np.diag(np.diag(M))
            mats.append(M)
        return mats

    def mats_to_vec(self, mats) -> np.ndarray:
        x = np.zeros(self.dim)
        for b, nb in enumerate(self.blocks):
            iu, scale = self._tri[nb]
            x[self.offsets[b]: self.offsets[b] + nb * (nb + 1) // 2] = mats[b][iu] * scale
        return x

    def tri(self, nb):
        return self._tri[nb]


def _entries_to_vec(entries, layout: _Layout) -> np.ndarray:
    """svec of a symmetric matrix given by upper-triangle entries.

    Entry value v at (i, j), i < j, denotes matrix value v at both mirror
    positions, so tr(A X) = svec(A).svec(X).
    """
    x = np.zeros(layout.dim)
    for blk, i, j, v in entries:
        x[layout.coord(blk, i, j)] = v * layout.entry_scale(i, j)
    return x


# ---------------------------------------------------------------------------
# presolve: eliminate equality rows, parametrize the feasible affine subspace
# ---------------------------------------------------------------------------


@dataclass
class _Presolve:
    layout: _Layout
    program: list            # ("axpy", tgt, src, f) rhs-transform steps, in order
    zero_rows: list          # rows whose transformed rhs must vanish
    dup_rows: list           # (dup_row, rep_row) pairs with equal patterns
    elim: list               # (col, kind, row, a, other_col, a_other) in order
    rcols: np.ndarray        # columns carried by the SVD stage
    free_cols: np.ndarray    # columns appearing in no constraint
    r_rows: list             # row ids of the SVD stage, in matrix order
    svd_u: np.ndarray
    svd_s: np.ndarray
    svd_vt: np.ndarray
    rank: int
    nullspace: np.ndarray    # (dim, n_free) parametrization of Ax = 0
    a_csr: csr_matrix        # original constraint matrix, m x dim
    scale: float             # magnitude reference for feasibility checks
    face_candidates: list    # per dense block: column set with all-constant corner

    @property
    def n_free(self) -> int:
        return self.nullspace.shape[1]


@dataclass
class _Reduced:
    """Facially reduced, rhs-specific form ready for the interior-point core.

    The feasible set {X : A x = b, X >= 0} is parametrized as
    x = x_p + N2 t with the PSD constraint expressed on the face
    H_b = Q_b^T X_b Q_b for every dense block.
    """

    lin_ok: bool
    fr_ok: bool
    x_p: np.ndarray
    n2: np.ndarray
    face_q: list             # per dense block: orthonormal face basis or None
    face_u: list             # per dense block: forced-null directions (nb, r)
    layout2: _Layout | None  # layout over reduced block sizes
    dense_map: list          # reduced dense position -> original dense index
    xp2_vec: np.ndarray | None
    fmats_hat: list          # parametrization tensors over layout2.dense
    fdiag_hat: np.ndarray | None
    n2_hat: np.ndarray | None  # reduced-svec parametrization matrix


_structure_cache: dict[str, _Presolve] = {}
_reduced_cache: dict[tuple, _Reduced] = {}
_cache_lock = threading.Lock()
_CACHE_CAP = 24
_REDUCED_CACHE_CAP = 80


def _build_presolve(problem: SdpProblem, layout: _Layout) -> _Presolve:
    m, dim = problem.m, layout.dim
    rows: list[dict[int, float] | None] = []
    data, indices, indptr = [], [], [0]
    for entries, _ in problem.constraints:
        row = {}
        for blk, i, j, v in entries:
            row[layout.coord(blk, i, j)] = v * layout.entry_scale(i, j)
        rows.append(row)
        cols = sorted(row)
        indices.extend(cols)
        data.extend(row[c] for c in cols)
        indptr.append(len(indices))
    a_csr = csr_matrix((data, indices, indptr), shape=(m, dim))
    scale = 1.0 + (abs(a_csr).max() if a_csr.nnz else 0.0)

    col_rows: dict[int, set[int]] = {}
    for r, row in enumerate(rows):
        for c in row:
            col_rows.setdefault(c, set()).add(r)

    program: list = []
    zero_rows: list[int] = []
    dup_rows: list = []
    elim: list = []
    retired = [False] * m

    def substitute(col: int, src: int, a_col: float, other: int | None, a_other: float):
        """x_col is expressed through row src; remove col from all other rows."""
        for r in sorted(col_rows.get(col, ())):
            if r == src or retired[r]:
                continue
            row = rows[r]
            coef = row.pop(col)
            f = -coef / a_col
            program.append(("axpy", r, src, f))
            if other is not None:
                new = row.get(other, 0.0) + f * a_other
                if new == 0.0 or abs(new) < 1e-15:
                    if other in row:
                        del row[other]
                        col_rows[other].discard(r)
                else:
                    if other not in row:
                        col_rows.setdefault(other, set()).add(r)
                    row[other] = new
            queue.append(r)
        col_rows.pop(col, None)

    queue = list(range(m))
    qpos = 0
    while qpos < len(queue):
        r = queue[qpos]
        qpos += 1
        if retired[r]:
            continue
        row = rows[r]
        nnz = len(row)
        if nnz > 2:
            continue
        if nnz == 0:
            retired[r] = True
            zero_rows.append(r)
            continue
        if nnz == 1:
            (col, a), = row.items()
            retired[r] = True
            elim.append((col, "pin", r, a, None, 0.0))
            col_rows[col].discard(r)
            substitute(col, r, a, None, 0.0)
            continue
        (c1, a1), (c2, a2) = sorted(row.items())
        occ1 = len(col_rows.get(c1, ())) - 1
        occ2 = len(col_rows.get(c2, ())) - 1
        col, a_col, other, a_other = (
            (c1, a1, c2, a2) if (occ1, c1) <= (occ2, c2) else (c2, a2, c1, a1)
        )
        if abs(a_col) < 1e-10 * abs(a_other):
            col, a_col, other, a_other = other, a_other, col, a_col
        retired[r] = True
        elim.append((col, "pair", r, a_col, other, a_other))
        col_rows[col].discard(r)
        substitute(col, r, a_col, other, a_other)

    r_rows_all = [r for r in range(m) if not retired[r]]
    pattern_map: dict[tuple, int] = {}
    r_rows: list[int] = []
    for r in r_rows_all:
        pat = tuple(sorted(rows[r].items()))
        rep = pattern_map.get(pat)
        if rep is not None:
            dup_rows.append((r, rep))
        else:
            pattern_map[pat] = r
            r_rows.append(r)

    rcol_set = sorted({c for r in r_rows for c in rows[r]})
    rcols = np.array(rcol_set, dtype=int)
    col_pos = {c: k for k, c in enumerate(rcol_set)}
    R = np.zeros((len(r_rows), len(rcol_set)))
    for k, r in enumerate(r_rows):
        for c, v in rows[r].items():
            R[k, col_pos[c]] = v

    if R.size:
        U, s, Vt = sla.svd(R, full_matrices=True)
        tol_rank = max(R.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        rank = int(np.sum(s > max(tol_rank, 1e-11)))
    else:
        U = np.zeros((len(r_rows), len(r_rows)))
        s = np.zeros(0)
        Vt = np.zeros((len(rcol_set), len(rcol_set)))
        rank = 0

    eliminated = {e[0] for e in elim}
    touched = set(rcol_set) | eliminated
    free_cols = np.array(
        sorted(c for c in range(dim) if c not in touched), dtype=int
    )

    n_null = len(rcol_set) - rank
    n_free = n_null + len(free_cols)
    N = np.zeros((dim, n_free))
    if n_null:
        N[rcols, :n_null] = Vt[rank:].T
    for k, c in enumerate(free_cols):
        N[c, n_null + k] = 1.0
    # eliminated columns: back-substitute their defining rows (reverse order)
    for col, kind, r, a_col, other, a_other in reversed(elim):
        if kind == "pair":
            N[col] = -(a_other / a_col) * N[other]
        # pins have no homogeneous part: N[col] stays zero

    # columns whose svec coordinates are constant over the affine subspace;
    # a fully constant principal corner can force a facial reduction
    const_coord = np.abs(N).max(axis=1) <= 1e-12 if n_free else np.ones(dim, dtype=bool)
    face_candidates = []
    for _, nb, off in layout.dense:
        def is_const(i, j):
            return const_coord[off + i * nb - i * (i - 1) // 2 + (j - i)]
        verts = [j for j in range(nb) if is_const(j, j)]
        clique: list[int] = []
        for j in verts:
            if all(is_const(min(j, k), max(j, k)) for k in clique):
                clique.append(j)
        face_candidates.append(clique if len(clique) >= 2 else [])

    return _Presolve(
        layout=layout,
        program=program,
        zero_rows=zero_rows,
        dup_rows=dup_rows,
        elim=elim,
        rcols=rcols,
        free_cols=free_cols,
        r_rows=r_rows,
        svd_u=U,
        svd_s=s,
        svd_vt=Vt,
        rank=rank,
        nullspace=N,
        a_csr=a_csr,
        scale=scale,
        face_candidates=face_candidates,
    )


def _structure_key(problem: SdpProblem) -> str:
    h = hashlib.sha256()
    h.update(repr(problem.blocks).encode())
    for entries, _ in problem.constraints:
        h.update(repr(entries).encode())
    return h.hexdigest()


def _get_presolve(problem: SdpProblem, layout: _Layout, key: str) -> _Presolve:
    with _cache_lock:
        pre = _structure_cache.get(key)
    if pre is not None:
        return pre
    pre = _build_presolve(problem, layout)
    with _cache_lock:
        if len(_structure_cache) >= _CACHE_CAP:
            _structure_cache.pop(next(iter(_structure_cache)))
        _structure_cache[key] = pre
    return pre


def _particular_solution(pre: _Presolve, b: np.ndarray, feastol: float):
    """Replay the elimination on a concrete rhs; returns (x_p, feasible)."""
    bw = b.astype(float).copy()
    for _, tgt, src, f in pre.program:
        bw[tgt] += f * bw[src]
    ok = all(abs(bw[r]) <= feastol * (1.0 + pre.scale) for r in pre.zero_rows)
    ok = ok and all(
        abs(bw[dup] - bw[rep]) <= feastol * (1.0 + pre.scale) for dup, rep in pre.dup_rows
    )
    x = np.zeros(pre.layout.dim)
    if pre.r_rows:
        r_vec = bw[pre.r_rows]
        if pre.rank:
            coeff = (pre.svd_u[:, : pre.rank].T @ r_vec) / pre.svd_s[: pre.rank]
            x_c = pre.svd_vt[: pre.rank].T @ coeff
        else:
            x_c = np.zeros(len(pre.rcols))
        resid = np.abs(
            pre.svd_u[:, pre.rank:].T @ r_vec if pre.svd_u.shape[1] > pre.rank else 0.0
        )
        if np.size(resid) and np.max(resid) > feastol * (1.0 + np.abs(r_vec).max()):
            ok = False
        x[pre.rcols] = x_c
    for col, kind, r, a_col, other, a_other in reversed(pre.elim):
        if kind == "pin":
            x[col] = bw[r] / a_col
        else:
            x[col] = (bw[r] - a_other * x[other]) / a_col
    return x, ok


def _pack_param_tensors(layout: _Layout, N: np.ndarray):
    """Unpack a svec parametrization into per-block matrix tensors."""
    p = N.shape[1]
    fmats = []
    for _, nb, off in layout.dense:
        iu, sc = layout.tri(nb)
        seg = N[off: off + nb * (nb + 1) // 2, :] / sc[:, None]
        T = np.zeros((p, nb, nb))
        T[:, iu[0], iu[1]] = seg.T
        T = T + np.transpose(T, (0, 2, 1))
        T[:, range(nb), range(nb)] /= 2.0
        fmats.append(T)
    fdiag = N[layout.diag_idx, :].T.copy() if layout.diag_idx.size else np.zeros((p, 0))
    return fmats, fdiag


def _build_reduced(pre: _Presolve, b: np.ndarray, feastol: float) -> _Reduced:
    """Replay the rhs and perform one facial-reduction round.

    Null directions of a constant singular corner force X u = 0 on every
    feasible X; those linear conditions are folded into the parametrization
    and the PSD constraint is restated on the face Q^T X Q.
    """
    lay = pre.layout
    x_p, lin_ok = _particular_solution(pre, b, feastol)
    none_reduced = _Reduced(
        lin_ok=lin_ok, fr_ok=True, x_p=x_p, n2=pre.nullspace,
        face_q=[None] * len(lay.dense), face_u=[None] * len(lay.dense),
        layout2=None, dense_map=[], xp2_vec=None, fmats_hat=[], fdiag_hat=None,
        n2_hat=None,
    )
    if not lin_ok:
        return none_reduced

    face_u: list = [None] * len(lay.dense)
    face_q: list = [None] * len(lay.dense)
    fr_rows: list[np.ndarray] = []
    for d, (blk, nb, off) in enumerate(lay.dense):
        J = pre.face_candidates[d]
        if not J:
            continue
        M0 = np.empty((len(J), len(J)))
        for a, i in enumerate(J):
            for c, j in enumerate(J):
                ii, jj = min(i, j), max(i, j)
                coord = off + ii * nb - ii * (ii - 1) // 2 + (jj - ii)
                M0[a, c] = x_p[coord] / (1.0 if ii == jj else _SQRT2)
        ew, ev = np.linalg.eigh(M0)
        null = ev[:, ew <= 1e-9 * max(1.0, ew.max())]
        if null.shape[1] == 0:
            continue
        U = np.zeros((nb, null.shape[1]))
        U[J, :] = null
        face_u[d] = U
        Qfull, _ = np.linalg.qr(np.hstack([U, np.eye(nb)]))
        face_q[d] = Qfull[:, null.shape[1]:]
        for i in range(nb):
            for u in U.T:
                row = np.zeros(lay.dim)
                for j in range(nb):
                    if u[j] == 0.0:
                        continue
                    ii, jj = min(i, j), max(i, j)
                    coord = off + ii * nb - ii * (ii - 1) // 2 + (jj - ii)
                    row[coord] += u[j] * (1.0 if ii == jj else 1.0 / _SQRT2)
                fr_rows.append(row)

    N = pre.nullspace
    if fr_rows:
        Rf = np.array(fr_rows)
        A_fr = Rf @ N
        rhs_f = -(Rf @ x_p)
        Uf, sf, Vtf = sla.svd(A_fr, full_matrices=True)
        tolr = max(A_fr.shape) * np.finfo(float).eps * (sf[0] if sf.size else 0.0)
        rk = int(np.sum(sf > max(tolr, 1e-11)))
        t_part = Vtf[:rk].T @ ((Uf[:, :rk].T @ rhs_f) / sf[:rk]) if rk else np.zeros(N.shape[1])
        resid = A_fr @ t_part - rhs_f
        if np.abs(resid).max() > 1e-7 * (1.0 + np.abs(rhs_f).max()):
            out = none_reduced
            out.fr_ok = False
            return out
        x_p = x_p + N @ t_part
        N = N @ Vtf[rk:].T if rk < N.shape[1] else np.zeros((lay.dim, 0))

    sizes2, dense_map = [], []
    for d, (blk, nb, off) in enumerate(lay.dense):
        s2 = nb if face_q[d] is None else face_q[d].shape[1]
        if s2 > 0:
            sizes2.append(s2)
            dense_map.append(d)
    ndiag = len(lay.diag_idx)
    if not sizes2 and ndiag == 0:
        out = none_reduced
        out.x_p, out.n2, out.face_q, out.face_u = x_p, N, face_q, face_u
        out.n2 = np.zeros((lay.dim, 0))
        return out
    layout2 = _Layout(tuple(sizes2) + (1,) * ndiag)

    fmats_full, fdiag_full = _pack_param_tensors(lay, N)
    xp_mats = lay.vec_to_mats(x_p)
    p2 = N.shape[1]
    n2_hat = np.zeros((layout2.dim, p2))
    xp2_vec = np.zeros(layout2.dim)
    for pos, d in enumerate(dense_map):
        blk, nb, off = lay.dense[d]
        Q = face_q[d]
        if Q is None:
            Fh, Xh = fmats_full[d], xp_mats[blk]
        else:
            Fh = np.matmul(Q.T, np.matmul(fmats_full[d], Q))
            Xh = Q.T @ xp_mats[blk] @ Q
        s2 = sizes2[pos]
        off2 = layout2.offsets[pos]
        iu, sc = layout2.tri(s2)
        n2_hat[off2: off2 + s2 * (s2 + 1) // 2, :] = (Fh[:, iu[0], iu[1]] * sc).T
        xp2_vec[off2: off2 + s2 * (s2 + 1) // 2] = Xh[iu] * sc
    for k in range(ndiag):
        off2 = layout2.offsets[len(sizes2) + k]
        n2_hat[off2, :] = fdiag_full[:, k]
        xp2_vec[off2] = x_p[lay.diag_idx[k]]

    fmats_hat, fdiag_hat = _pack_param_tensors(layout2, n2_hat)
    return _Reduced(
        lin_ok=True, fr_ok=True, x_p=x_p, n2=N,
        face_q=face_q, face_u=face_u,
        layout2=layout2, dense_map=dense_map,
        xp2_vec=xp2_vec, fmats_hat=fmats_hat, fdiag_hat=fdiag_hat, n2_hat=n2_hat,
    )


def _get_reduced(problem: SdpProblem, pre: _Presolve, b: np.ndarray, feastol: float,
                 key: str) -> _Reduced:
    rkey = (key, b.tobytes())
    with _cache_lock:
        red = _reduced_cache.get(rkey)
    if red is not None:
        return red
    red = _build_reduced(pre, b, feastol)
    with _cache_lock:
        if len(_reduced_cache) >= _REDUCED_CACHE_CAP:
            _reduced_cache.pop(next(iter(_reduced_cache)))
        _reduced_cache[rkey] = red
    return red


# ---------------------------------------------------------------------------
# interior-point core on the reduced problem
#   maximize q.t   s.t.   S(t) = mat(x_p) + sum_k t_k F_k  >= 0
# ---------------------------------------------------------------------------


class _BlockVars:
    """State on the cone: dense PSD blocks plus a nonnegative diag segment."""

    def __init__(self, dense_mats: list[np.ndarray], diag: np.ndarray):
        self.dense = dense_mats
        self.diag = diag

    def inner(self, other: "_BlockVars") -> float:
        tot = float(np.dot(self.diag, other.diag))
        for A, B in zip(self.dense, other.dense):
            tot += float(np.sum(A * B))
        return tot

    def copy(self):
        return _BlockVars([M.copy() for M in self.dense], self.diag.copy())


def _nt_scaling(S: np.ndarray, Z: np.ndarray):
    """NT scaling W with W Z W = S, returned as (W^-1, S^-1).

    Computed from Cholesky factors and an SVD (Todd/Toh/Tutuncu form), which
    stays accurate when S and Z are nearly rank-deficient at optimality.
    """
    Ls = np.linalg.cholesky(S)
    Lz = np.linalg.cholesky(Z)
    U, sv, Vt = np.linalg.svd(Lz.T @ Ls)
    sv = np.maximum(sv, 1e-150)
    # G = Ls V diag(sv)^{-1/2} gives W = G G^T with W Z W = S
    Ls_inv = sla.solve_triangular(Ls, np.eye(S.shape[0]), lower=True)
    Ginv = (np.sqrt(sv)[:, None] * Vt) @ Ls_inv
    Winv = Ginv.T @ Ginv
    Sinv = Ls_inv.T @ Ls_inv
    return Winv, Sinv, Ginv


def _syrk(K: np.ndarray) -> np.ndarray:
    """K.T @ K via the symmetric rank-k BLAS kernel."""
    from scipy.linalg.blas import dsyrk

    M = dsyrk(1.0, K, trans=1, lower=0)
    return M + np.triu(M, 1).T


def _max_step(M: np.ndarray, dM: np.ndarray) -> float:
    """sup {a : M + a dM >= 0} via the generalized eigenvalue bound."""
    L = np.linalg.cholesky(M)
    Y = sla.solve_triangular(L, dM, lower=True)
    Y = sla.solve_triangular(L, Y.T, lower=True)
    w = np.linalg.eigvalsh(0.5 * (Y + Y.T))
    wmin = w.min()
    return np.inf if wmin >= 0 else -1.0 / wmin


def _ipm_reduced(lay: _Layout, N: np.ndarray, x_p: np.ndarray, fmats: list,
                 fdiag: np.ndarray, q: np.ndarray, tol: float, max_iter: int,
                 verbose: bool = False):
    """Solve max q.t s.t. mat(x_p + N t) >= 0; returns (t, s_vec, z_vec, status, iters).

    Infeasible-start primal-dual path following with NT scaling and a
    Mehrotra predictor-corrector.  All complementarity arithmetic is done in
    the scaled coordinates (where the scaled point is the diagonal of NT
    singular values), which keeps magnitudes balanced near optimality.
    """
    p = N.shape[1]
    xp_mats = lay.vec_to_mats(x_p)
    dense_ids = [b for b, _, _ in lay.dense]
    ndiag = len(lay.diag_idx)

    norm_xp = 1.0 + np.linalg.norm(x_p)
    norm_q = 1.0 + np.linalg.norm(q)

    rho = 10.0 * (1.0 + max(
        [np.abs(M).max() if M.size else 0.0 for M in xp_mats] or [0.0]
    ))
    S = [rho * np.eye(nb) for _, nb, _ in lay.dense]
    Z = [rho * np.eye(nb) for _, nb, _ in lay.dense]
    s_diag = rho * np.ones(ndiag)
    z_diag = rho * np.ones(ndiag)
    t = np.zeros(p)
    ncone = sum(nb for _, nb, _ in lay.dense) + ndiag

    def pack(mats, diag):
        x = np.zeros(lay.dim)
        for (b, nb, off), M in zip(lay.dense, mats):
            iu, sc = lay.tri(nb)
            x[off: off + nb * (nb + 1) // 2] = M[iu] * sc
        x[lay.diag_idx] = diag
        return x

    def unpack_scaled(vec):
        """Split a reduced-svec vector into per-dense-block matrices + diag."""
        mats = []
        for (b, nb, off) in lay.dense:
            iu, sc = lay.tri(nb)
            seg = vec[off: off + nb * (nb + 1) // 2] / sc
            M = np.zeros((nb, nb))
            M[iu] = seg
            mats.append(M + M.T - np.diag(np.diag(M)))
        return mats, vec[lay.diag_idx]

    status = "max_iterations"
    iters = 0
    stall = 0
    for it in range(1, max_iter + 1):
        iters = it
        s_vec = pack(S, s_diag)
        z_vec = pack(Z, z_diag)
        rp_vec = x_p + N @ t - s_vec
        rd = q + N.T @ z_vec
        gap = float(s_vec @ z_vec)
        pobj = float(q @ t)
        dobj = float(np.dot(x_p, z_vec))
        relgap = gap / (1.0 + abs(pobj) + abs(dobj))
        pinf = np.linalg.norm(rp_vec) / norm_xp
        dinf = np.linalg.norm(rd) / norm_q
        if verbose:
            print(
                f"  it {it:3d}  pobj {pobj:+.8e}  gap {relgap:.2e}  "
                f"pinf {pinf:.2e}  dinf {dinf:.2e}"
            )
        if not np.isfinite(gap) or not np.isfinite(pinf) or not np.isfinite(dinf):
            status = "numerical_failure"
            break
        if pinf <= tol and dinf <= tol and relgap <= tol:
            status = "optimal"
            break
        znorm = np.linalg.norm(z_vec)
        if znorm > 1e4:
            zhat = z_vec / znorm
            if np.linalg.norm(N.T @ zhat) < 1e-7 and np.dot(x_p, zhat) < -1e-7:
                status = "infeasible"
                break
        tnorm = np.linalg.norm(t)
        if tnorm > 1e4 and pinf <= 1e-7:
            that = t / tnorm
            dmats, ddiag = unpack_scaled(N @ that)
            mineig = min([np.linalg.eigvalsh(M).min() for M in dmats] or [0.0])
            dmin = ddiag.min() if ddiag.size else 0.0
            if min(mineig, dmin) > -1e-7 and q @ that > 1e-7 * norm_q:
                status = "unbounded"
                break
        if znorm > 1e9 or tnorm > 1e9:
            status = "numerical_failure"
            break

        mu = gap / ncone

        # NT scaling per block: G = Ls V diag(sig)^(-1/2); scaled point = diag(sig)
        try:
            g_blocks, sig_blocks = [], []
            for Ms, Mz in zip(S, Z):
                Ls = np.linalg.cholesky(Ms)
                Lz = np.linalg.cholesky(Mz)
                U, sv, Vt = np.linalg.svd(Lz.T @ Ls)
                sv = np.maximum(sv, 1e-150)
                G = (Ls @ Vt.T) / np.sqrt(sv)
                g_blocks.append(G)
                sig_blocks.append(sv)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break
        lam_diag = np.sqrt(s_diag * z_diag)
        w_diag = np.sqrt(s_diag / z_diag)

        # K holds svec(G^-1 F_k G^-T): Schur matrix M = K^T K
        ginv_blocks = [np.linalg.inv(G) for G in g_blocks]
        K = np.zeros((lay.dim, p))
        for (b, nb, off), F, Gi in zip(lay.dense, fmats, ginv_blocks):
            T = np.matmul(Gi, np.matmul(F, Gi.T))
            iu, sc = lay.tri(nb)
            K[off: off + nb * (nb + 1) // 2, :] = (T[:, iu[0], iu[1]] * sc).T
        if ndiag:
            K[lay.diag_idx, :] = (fdiag / w_diag if ndiag else fdiag).T
        Mschur = _syrk(K)
        dscale = np.sqrt(np.maximum(np.diag(Mschur), 1e-300))
        Meq = Mschur / dscale / dscale[:, None]
        cho = None
        for jitter in (0.0, 1e-14, 1e-11, 1e-8):
            try:
                reg = Meq if jitter == 0.0 else Meq + np.eye(p) * jitter
                cho = sla.cho_factor(reg, lower=True)
                break
            except np.linalg.LinAlgError:
                continue
        if cho is None:
            status = "numerical_failure"
            break

        def schur_solve(rhs):
            dt = sla.cho_solve(cho, rhs / dscale) / dscale
            for _ in range(3):
                resid = rhs - Mschur @ dt
                if np.abs(resid).max() <= 1e-14 * (1.0 + np.abs(rhs).max()):
                    break
                dt = dt + sla.cho_solve(cho, resid / dscale) / dscale
            return dt

        # scaled primal residual G^-1 Rp G^-T as a reduced-svec vector
        rp_mats, rp_diag = unpack_scaled(rp_vec)
        rpt_vec = np.zeros(lay.dim)
        for (b, nb, off), M, Gi in zip(lay.dense, rp_mats, ginv_blocks):
            Mt = Gi @ M @ Gi.T
            iu, sc = lay.tri(nb)
            rpt_vec[off: off + nb * (nb + 1) // 2] = Mt[iu] * sc
        if ndiag:
            rpt_vec[lay.diag_idx] = rp_diag / w_diag

        def lyapunov_inv(mats, diag):
            """Solve sig o X = M elementwise: X_ij = 2 M_ij / (sig_i + sig_j)."""
            out = []
            for sv, M in zip(sig_blocks, mats):
                out.append(2.0 * M / np.add.outer(sv, sv))
            return out, (diag / lam_diag if ndiag else diag)

        def solve_direction(rc_mats, rc_diag):
            rcl_mats, rcl_diag = lyapunov_inv(rc_mats, rc_diag)
            rcl_vec = np.zeros(lay.dim)
            for (b, nb, off), M in zip(lay.dense, rcl_mats):
                iu, sc = lay.tri(nb)
                rcl_vec[off: off + nb * (nb + 1) // 2] = M[iu] * sc
            if ndiag:
                rcl_vec[lay.diag_idx] = rcl_diag
            rhs = K.T @ (rcl_vec - rpt_vec) + rd
            dt = schur_solve(rhs)
            dst_vec = K @ dt + rpt_vec          # scaled primal slack step
            dzt_vec = rcl_vec - dst_vec          # scaled dual step
            return dt, dst_vec, dzt_vec

        def max_scaled_step(vec, which):
            """sup {a : Sig + a * mat(vec) >= 0} in scaled coordinates."""
            mats, diag = unpack_scaled(vec)
            a = np.inf
            for sv, M in zip(sig_blocks, mats):
                rs = 1.0 / np.sqrt(sv)
                w = np.linalg.eigvalsh(rs[:, None] * M * rs[None, :])
                wmin = w.min() if w.size else 0.0
                if wmin < 0:
                    a = min(a, -1.0 / wmin)
            if ndiag and diag.size:
                neg = diag < 0
                if neg.any():
                    a = min(a, float(np.min(-lam_diag[neg] / diag[neg])))
            return a

        try:
            # predictor: target S Z -> 0
            rc_mats = [-np.diag(sv**2) for sv in sig_blocks]
            rc_diag = -(lam_diag**2)
            dt_a, dst_a, dzt_a = solve_direction(rc_mats, rc_diag)
            ap_a = max_scaled_step(dst_a, "s")
            ad_a = max_scaled_step(dzt_a, "z")
            a_a = min(1.0, 0.99 * min(ap_a, ad_a))
            # gap after affine step, in scaled coordinates: <Sig+a dS, Sig+a dZ>
            lam_vec = pack([np.diag(sv) for sv in sig_blocks], lam_diag)
            gap_aff = float((lam_vec + a_a * dst_a) @ (lam_vec + a_a * dzt_a))
            sigma = min(0.99, max(1e-8, (max(gap_aff, 0.0) / gap) ** 3))

            # corrector with second-order term H(dS_aff dZ_aff)
            ds_mats, ds_diag = unpack_scaled(dst_a)
            dz_mats, dz_diag = unpack_scaled(dzt_a)
            rc_mats = [
                sigma * mu * np.eye(len(sv)) - np.diag(sv**2)
                - 0.5 * (DS @ DZ + DZ @ DS)
                for sv, DS, DZ in zip(sig_blocks, ds_mats, dz_mats)
            ]
            rc_diag = sigma * mu - lam_diag**2 - ds_diag * dz_diag
            dt, dst_vec, dzt_vec = solve_direction(rc_mats, rc_diag)
            ap = max_scaled_step(dst_vec, "s")
            ad = max_scaled_step(dzt_vec, "z")
            a_p = min(1.0, 0.98 * ap)
            a_d = min(1.0, 0.98 * ad)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break
        if min(a_p, a_d) < 1e-10:
            stall += 1
            if stall >= 8:
                status = "numerical_failure"
                break
        else:
            stall = 0
        t = t + a_p * dt
        ds_mats, ds_diag = unpack_scaled(dst_vec)
        dz_mats, dz_diag = unpack_scaled(dzt_vec)
        for i, (G, DS, DZ) in enumerate(zip(g_blocks, ds_mats, dz_mats)):
            S[i] = S[i] + a_p * (G @ DS @ G.T)
            Gi = ginv_blocks[i]
            Z[i] = Z[i] + a_d * (Gi.T @ DZ @ Gi)
            S[i] = 0.5 * (S[i] + S[i].T)
            Z[i] = 0.5 * (Z[i] + Z[i].T)
        if ndiag:
            s_diag = s_diag + a_p * (w_diag * ds_diag)
            z_diag = z_diag + a_d * (dz_diag / w_diag)

    s_vec = pack(S, s_diag)
    z_vec = pack(Z, z_diag)
    return t, s_vec, z_vec, status, iters


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

_audit_sinks: list[list] = []


@contextmanager
def collect_audit(tol: float = 1e-6):
    """Collect an independent check of every optimal solve inside the block."""
    sink: list = []
    _audit_sinks.append(sink)
    try:
        yield sink
    finally:
        _audit_sinks.remove(sink)


def _infeasible_solution(problem: SdpProblem) -> SdpSolution:
    return SdpSolution(
        primal_blocks=[np.zeros((nb, nb)) for nb in problem.blocks],
        dual=np.zeros(problem.m),
        status="infeasible",
        objective=float("nan"),
        residuals={"primal_infeasibility": float("inf"),
                   "dual_infeasibility": float("inf"),
                   "duality_gap": float("inf")},
        iterations=0,
    )


def solve(problem: SdpProblem, tolerance: float = 1e-8, max_iterations: int = 200,
          verbose: bool = False) -> SdpSolution:
    """Solve a standard-form SDP with the owned interior-point method."""
    layout = _Layout(problem.blocks)
    key = _structure_key(problem)
    pre = _get_presolve(problem, layout, key)
    b = np.array([rhs for _, rhs in problem.constraints])
    c = _entries_to_vec(problem.objective, layout)
    feastol = max(tolerance, 1e-9)

    red = _get_reduced(problem, pre, b, feastol, key)
    if not red.lin_ok or not red.fr_ok:
        return _infeasible_solution(problem)

    sense_sign = 1.0 if problem.sense == "max" else -1.0
    p2 = red.n2.shape[1]
    q = sense_sign * (red.n2.T @ c)

    if p2 == 0 or red.layout2 is None:
        mats = layout.vec_to_mats(red.x_p)
        mineig = min(np.linalg.eigvalsh(M).min() for M in mats)
        status = "infeasible" if mineig < -1e-8 else "optimal"
        z_vec = np.zeros(layout.dim)
        t = np.zeros(0)
        iters = 0
    else:
        t, s_hat, z_hat, status, iters = _ipm_reduced(
            red.layout2, red.n2_hat, red.xp2_vec, red.fmats_hat, red.fdiag_hat,
            q, tolerance, max_iterations, verbose=verbose,
        )
        # lift the reduced dual matrix back to the original cone: Z = Q Zhat Q^T
        z_mats2 = red.layout2.vec_to_mats(z_hat)
        z_full = [np.zeros((nb, nb)) for nb in problem.blocks]
        for pos, d in enumerate(red.dense_map):
            blk, nb, off = layout.dense[d]
            Q = red.face_q[d]
            z_full[blk] = z_mats2[pos] if Q is None else Q @ z_mats2[pos] @ Q.T
        ndense2 = len(red.dense_map)
        diag_blocks = [blk for blk, nb in enumerate(problem.blocks) if nb == 1]
        for k, blk in enumerate(diag_blocks):
            z_full[blk][0, 0] = z_hat[red.layout2.offsets[ndense2 + k]]
        z_vec = layout.mats_to_vec(z_full)

    x_vec = red.x_p + (red.n2 @ t if p2 else 0.0)
    primal_blocks = layout.vec_to_mats(x_vec)

    # dual lifting: A^T y (+ face corrections) = c + sense_sign * z
    d_vec = c + sense_sign * z_vec
    if problem.m:
        mats_aug = [pre.a_csr.T]
        for dd, U in enumerate(red.face_u):
            if U is None:
                continue
            blk, nb, off = layout.dense[dd]
            cols = []
            for u in U.T:
                for j in range(nb):
                    # svec of sym(u e_j^T)
                    col = np.zeros(layout.dim)
                    for i in range(nb):
                        if u[i] == 0.0:
                            continue
                        ii, jj = min(i, j), max(i, j)
                        coord = off + ii * nb - ii * (ii - 1) // 2 + (jj - ii)
                        col[coord] += u[i] if i == j else u[i] / _SQRT2
                    cols.append(col)
            if cols:
                mats_aug.append(csr_matrix(np.array(cols).T))
        if len(mats_aug) > 1:
            from scipy.sparse import hstack as sp_hstack

            A_aug = sp_hstack(mats_aug, format="csr")
        else:
            A_aug = mats_aug[0]
        res = lsqr(A_aug, d_vec, atol=1e-14, btol=1e-14,
                   iter_lim=10 * (A_aug.shape[1] + layout.dim))
        y = res[0][: problem.m]
    else:
        y = np.zeros(0)

    pobj = float(c @ x_vec)
    dobj = float(b @ y) if problem.m else 0.0
    prim_res = (
        float(np.abs(pre.a_csr @ x_vec - b).max()) if problem.m else 0.0
    )
    slack_vec = sense_sign * ((pre.a_csr.T @ y if problem.m else 0.0) - c)
    slack_eig = min(np.linalg.eigvalsh(M).min() for M in layout.vec_to_mats(slack_vec))
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    residuals = {
        "primal_infeasibility": prim_res,
        "dual_infeasibility": max(0.0, -float(slack_eig)),
        "duality_gap": gap,
    }
    sol = SdpSolution(
        primal_blocks=primal_blocks,
        dual=y,
        status=status,
        objective=pobj if status in ("optimal", "max_iterations") else float("nan"),
        residuals=residuals,
        iterations=iters,
    )
    if status == "optimal" and _audit_sinks:
        report = check_solution(problem, sol, 1e-6)
        for sink in _audit_sinks:
            sink.append(report)
    return sol


@dataclass
class ResidualReport:
    primal_residual: float
    min_eigenvalue: float
    dual_slack_min_eigenvalue: float
    duality_gap: float
    passed: bool


def check_solution(problem: SdpProblem, solution: SdpSolution, tol: float) -> ResidualReport:
    """Recompute residuals independently of the solver's bookkeeping."""
    layout = _Layout(problem.blocks)
    for M, nb in zip(solution.primal_blocks, problem.blocks):
        if M.shape != (nb, nb):
            raise ValueError("solution block shapes do not match the problem")
    x_vec = layout.mats_to_vec(solution.primal_blocks)
    c = _entries_to_vec(problem.objective, layout)
    prim = 0.0
    for (entries, rhs) in problem.constraints:
        a = _entries_to_vec(entries, layout)
        prim = max(prim, abs(float(a @ x_vec) - rhs))
    mineig = min(np.linalg.eigvalsh(M).min() for M in solution.primal_blocks)
    sense_sign = 1.0 if problem.sense == "max" else -1.0
    slack = -sense_sign * c
    for k, (entries, _) in enumerate(problem.constraints):
        a = _entries_to_vec(entries, layout)
        slack += sense_sign * solution.dual[k] * a
    slack_eig = min(np.linalg.eigvalsh(M).min() for M in layout.vec_to_mats(slack))
    pobj = float(c @ x_vec)
    dobj = float(np.dot([rhs for _, rhs in problem.constraints], solution.dual)) if problem.m else 0.0
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    passed = prim <= tol and mineig >= -tol and slack_eig >= -tol and gap <= tol
    return ResidualReport(
        primal_residual=prim,
        min_eigenvalue=float(mineig),
        dual_slack_min_eigenvalue=float(slack_eig),
        duality_gap=gap,
        passed=bool(passed),
    )


# ---------------------------------------------------------------------------
# SDPA sparse text format
# ---------------------------------------------------------------------------


def _write_blocks(blocks: tuple[int, ...]):
    """Group runs of 1x1 blocks into negative diagonal sizes.

    Returns (sizes, mapping original block -> (written block index, offset)).
    """
    sizes: list[int] = []
    mapping: dict[int, tuple[int, int]] = {}
    i = 0
    while i < len(blocks):
        if blocks[i] == 1:
            j = i
            while j < len(blocks) and blocks[j] == 1:
                mapping[j] = (len(sizes), j - i)
                j += 1
            sizes.append(-(j - i))
            i = j
        else:
            mapping[i] = (len(sizes), 0)
            sizes.append(blocks[i])
            i += 1
    return sizes, mapping


def write_sdpa(problem: SdpProblem) -> str:
    """Serialize to SDPA sparse text (matno 0 carries the objective)."""
    sizes, mapping = _write_blocks(problem.blocks)
    lines = []
    lines.append(f"{problem.m} *max" if problem.sense == "max" else f"{problem.m}")
    lines.append(str(len(sizes)))
    lines.append(" ".join(str(s) for s in sizes))
    lines.append(" ".join("%.17g" % rhs for _, rhs in problem.constraints))

    def emit(matno: int, entries):
        out = []
        for blk, i, j, v in entries:
            wb, off = mapping[blk]
            out.append((wb + 1, i + off + 1, j + off + 1, v))
        for wb, i, j, v in sorted(out):
            lines.append("%d %d %d %d %.17g" % (matno, wb, i, j, v))

    emit(0, problem.objective)
    for k, (entries, _) in enumerate(problem.constraints):
        emit(k + 1, entries)
    return "\n".join(lines) + "\n"


def read_sdpa(text: str) -> SdpProblem:
    """Parse SDPA sparse text written by ``write_sdpa``."""
    raw_lines = text.splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(raw_lines)]
    pos = 0

    def next_line(allow_blank=False):
        nonlocal pos
        while pos < len(lines):
            no, ln = lines[pos]
            pos += 1
            stripped = ln.strip()
            if stripped.startswith(('"', "*")) and no > 1 and not allow_blank:
                continue
            if stripped or allow_blank:
                return no, stripped
        return len(lines) + 1, None

    no, ln = next_line()
    if ln is None:
        raise SdpaParseError(no, "missing constraint count")
    toks = ln.split()
    try:
        m = int(toks[0])
    except ValueError:
        raise SdpaParseError(no, f"bad constraint count {toks[0]!r}") from None
    sense = "max" if "*max" in toks[1:] else "min"
    if m < 0:
        raise SdpaParseError(no, "negative constraint count")

    no, ln = next_line()
    if ln is None:
        raise SdpaParseError(no, "missing block count")
    try:
        nblocks = int(ln.split()[0])
    except ValueError:
        raise SdpaParseError(no, "bad block count") from None

    no, ln = next_line()
    if ln is None:
        raise SdpaParseError(no, "missing block sizes")
    try:
        sizes = [int(v) for v in ln.replace(",", " ").split()]
    except ValueError:
        raise SdpaParseError(no, "bad block size") from None
    if len(sizes) != nblocks:
        raise SdpaParseError(no, f"expected {nblocks} block sizes, got {len(sizes)}")
    blocks: list[int] = []
    written_map: list[tuple[int, int]] = []  # written block -> (first original, size or -count)
    for s in sizes:
        if s == 0:
            raise SdpaParseError(no, "zero block size")
        written_map.append((len(blocks), s))
        if s < 0:
            blocks.extend([1] * (-s))
        else:
            blocks.append(s)

    no, ln = next_line(allow_blank=True)
    if ln is None and m > 0:
        raise SdpaParseError(no, "missing rhs vector")
    rhs_vals: list[float] = []
    if ln:
        try:
            rhs_vals = [float(v) for v in ln.replace(",", " ").split()]
        except ValueError:
            raise SdpaParseError(no, "bad rhs value") from None
    if len(rhs_vals) != m:
        raise SdpaParseError(no, f"expected {m} rhs values, got {len(rhs_vals)}")

    mats: list[list[Entry]] = [[] for _ in range(m + 1)]
    while True:
        no, ln = next_line()
        if ln is None:
            break
        toks = ln.split()
        if len(toks) != 5:
            raise SdpaParseError(no, f"expected 5 tokens, got {len(toks)}")
        try:
            matno, wb, i, j, val = int(toks[0]), int(toks[1]), int(toks[2]), int(toks[3]), float(toks[4])
        except ValueError:
            raise SdpaParseError(no, "bad entry token") from None
        if not 0 <= matno <= m:
            raise SdpaParseError(no, f"matrix number {matno} out of range")
        if not 1 <= wb <= len(written_map):
            raise SdpaParseError(no, f"block number {wb} out of range")
        first, s = written_map[wb - 1]
        if s < 0:
            if i != j:
                raise SdpaParseError(no, "off-diagonal entry in a diagonal block")
            if not 1 <= i <= -s:
                raise SdpaParseError(no, "index out of range in diagonal block")
            mats[matno].append((first + i - 1, 0, 0, val))
        else:
            if not (1 <= i <= s and 1 <= j <= s):
                raise SdpaParseError(no, f"index ({i},{j}) outside block of size {s}")
            mats[matno].append((first, i - 1, j - 1, val))

    try:
        return SdpProblem(
            blocks=tuple(blocks),
            constraints=tuple((tuple(mats[k + 1]), rhs_vals[k]) for k in range(m)),
            objective=tuple(mats[0]),
            sense=sense,
        )
    except ValueError as exc:
        raise SdpaParseError(len(raw_lines), str(exc)) from None
