"""Hierarchy operator sets and the block moment matrix.

Level-k word sets are grown from the full-chain site operators; the moment
matrix over ``n`` prepared states is an ``(n*l) x (n*l)`` symmetric matrix
whose entries are indexed by canonical words.  Entries sharing a canonical
word (up to adjoint and state-pair swap) share one variable; identity entries
are pinned to the Gram matrix, operator-zero entries to 0.  The one-way
no-signaling sum identities are instantiated inside every row context and
recorded as linear relations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .seqalgebra import (
    IDENTITY,
    CanonicalWord,
    NetworkShape,
    SiteOperator,
    adjoint,
    multiply,
    nosignaling_relations,
    word_from_site,
)
from .sdpcore import SdpProblem


@dataclass(frozen=True)
class GramSpec:
    """Inner-product matrix of the prepared states."""

    n: int
    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "lam", lam)
        if lam.shape != (self.n, self.n):
            raise ValueError(f"lambda must be {self.n}x{self.n}")
        if not np.allclose(lam, lam.T, atol=1e-12):
            raise ValueError("lambda must be symmetric")
        if not np.allclose(np.diag(lam), 1.0, atol=1e-12):
            raise ValueError("lambda must have unit diagonal")
        if np.linalg.eigvalsh(lam).min() < -1e-9:
            raise ValueError("lambda must be positive semidefinite")


@dataclass(frozen=True)
class OperatorSet:
    """Ordered duplicate-free word list with the identity at index 0."""

    shape: NetworkShape
    words: tuple[CanonicalWord, ...]

    def __post_init__(self):
        if not self.words or not self.words[0].is_identity:
            raise ValueError("identity must be the first word")
        seen = set()
        for w in self.words:
            if w.is_zero:
                raise ValueError("zero word not allowed in an operator set")
            if w.key() in seen:
                raise ValueError(f"duplicate word {w}")
            seen.add(w.key())

    def __len__(self):
        return len(self.words)


def _full_chain_operators(shape: NetworkShape) -> list[CanonicalWord]:
    ops = []
    for p in range(shape.parties):
        for x in shape.input_choices(p):
            for a in shape.outcome_choices(p):
                ops.append(word_from_site(SiteOperator(p, x, a)))
    return ops


def level_set(shape: NetworkShape, k: int) -> OperatorSet:
    """Level-k hierarchy set: identity, all chain operators, and products."""
    if k < 1:
        raise ValueError("level must be >= 1")
    s1 = [IDENTITY] + _full_chain_operators(shape)
    words = list(s1)
    seen = {w.key() for w in words}
    current = words
    for _ in range(k - 1):
        nxt = list(current)
        for wi in current:
            for wj in s1:
                w = multiply(wi, wj)
                if w.is_zero or w.key() in seen:
                    continue
                seen.add(w.key())
                nxt.append(w)
        current = nxt
    return OperatorSet(shape, tuple(current))


def custom_set(shape: NetworkShape, words) -> OperatorSet:
    """Build a set from caller-chosen words; the identity is prepended if absent."""
    words = list(words)
    if not any(w.is_identity for w in words):
        words = [IDENTITY] + words
    else:
        words.sort(key=lambda w: not w.is_identity)  # stable: identity first
    return OperatorSet(shape, tuple(words))


@dataclass
class LinearExpr:
    """Sparse linear expression c . x + constant over model variable ids."""

    terms: tuple[tuple[int, float], ...] = ()
    constant: float = 0.0

    @staticmethod
    def combine(pairs, constant: float = 0.0) -> "LinearExpr":
        acc: dict[int, float] = {}
        for vid, coeff in pairs:
            acc[vid] = acc.get(vid, 0.0) + coeff
        terms = tuple((v, c) for v, c in acc.items() if c != 0.0)
        return LinearExpr(terms, constant)

    def __add__(self, other: "LinearExpr") -> "LinearExpr":
        return LinearExpr.combine(
            list(self.terms) + list(other.terms), self.constant + other.constant
        )

    def scale(self, s: float) -> "LinearExpr":
        return LinearExpr(tuple((v, c * s) for v, c in self.terms), self.constant * s)

    def __post_init__(self):
        for _, c in self.terms:
            if not np.isfinite(c):
                raise ValueError("non-finite coefficient")
        if not np.isfinite(self.constant):
            raise ValueError("non-finite constant")


@dataclass
class MomentModel:
    """Variable-indexed block moment matrix with its linear constraints."""

    opset: OperatorSet
    gram: GramSpec
    size: int                                  # n*l
    var_table: dict                            # unification key -> variable id
    var_rep_entry: list                        # variable id -> (I, J) representative
    var_entries: list                          # variable id -> all upper-tri (I, J)
    var_word: list                             # variable id -> (word, z, z') of representative
    const_mask: np.ndarray                     # bool (size, size)
    const_value: np.ndarray                    # float (size, size)
    var_id: np.ndarray                         # int (size, size), -1 where constant
    relations: list                            # LinearExpr == 0, from no-signaling sums
    extra_constraints: list = field(default_factory=list)  # (LinearExpr, rel, rhs)
    anchors: dict = field(default_factory=dict)            # resolved probability refs

    @property
    def n_vars(self) -> int:
        return len(self.var_rep_entry)

    def words(self):
        return self.opset.words


def _unify_key(word: CanonicalWord, z: int, zp: int):
    a = (word.key(), z, zp)
    adj = adjoint(word)
    b = (adj.key(), zp, z)
    return min(a, b)


def build_model(opset: OperatorSet, gram: GramSpec) -> MomentModel:
    """Assemble the moment model for an operator set and a Gram matrix."""
    shape = opset.shape
    if gram.n != shape.n_states:
        raise ValueError(
            f"gram has {gram.n} states but the network shape declares {shape.n_states}"
        )
    words = opset.words
    l, n = len(words), gram.n
    size = n * l

    adjoints = [adjoint(w) for w in words]
    table = [[multiply(adjoints[i], words[j]) for j in range(l)] for i in range(l)]

    const_mask = np.zeros((size, size), dtype=bool)
    const_value = np.zeros((size, size), dtype=float)
    var_id = np.full((size, size), -1, dtype=np.int32)
    var_table: dict = {}
    var_rep_entry: list[tuple[int, int]] = []
    var_entries: list[list[tuple[int, int]]] = []
    var_word: list[tuple[CanonicalWord, int, int]] = []

    for z in range(n):
        for zp in range(n):
            base_r, base_c = z * l, zp * l
            for i in range(l):
                gi = base_r + i
                for j in range(l):
                    gj = base_c + j
                    if gi > gj:
                        continue
                    w = table[i][j]
                    if w.is_zero:
                        const_mask[gi, gj] = const_mask[gj, gi] = True
                        continue
                    if w.is_identity:
                        const_mask[gi, gj] = const_mask[gj, gi] = True
                        const_value[gi, gj] = const_value[gj, gi] = gram.lam[z, zp]
                        continue
                    key = _unify_key(w, z, zp)
                    vid = var_table.get(key)
                    if vid is None:
                        vid = len(var_rep_entry)
                        var_table[key] = vid
                        var_rep_entry.append((gi, gj))
                        var_entries.append([])
                        var_word.append((w, z, zp))
                    var_entries[vid].append((gi, gj))
                    var_id[gi, gj] = var_id[gj, gi] = vid

    model = MomentModel(
        opset=opset,
        gram=gram,
        size=size,
        var_table=var_table,
        var_rep_entry=var_rep_entry,
        var_entries=var_entries,
        var_word=var_word,
        const_mask=const_mask,
        const_value=const_value,
        var_id=var_id,
        relations=[],
    )

    relations: list[LinearExpr] = []
    seen_rel = set()
    ns_rels = nosignaling_relations(shape)
    for u_idx, u in enumerate(words):
        ua = adjoints[u_idx]
        for rel in ns_rels:
            for z in range(n):
                for zp in range(n):
                    pairs: list[tuple[int, float]] = []
                    constant = 0.0
                    ok = True
                    for fam, sign in ((rel.lhs_family, 1.0), (rel.rhs_family, -1.0)):
                        for op in fam:
                            w = multiply(ua, word_from_site(op))
                            if w.is_zero:
                                continue
                            if w.is_identity:
                                constant += sign * gram.lam[z, zp]
                                continue
                            vid = var_table.get(_unify_key(w, z, zp))
                            if vid is None:
                                ok = False
                                break
                            pairs.append((vid, sign))
                        if not ok:
                            break
                    if not ok:
                        continue
                    if rel.rhs_is_identity:
                        if u.is_identity:
                            constant -= gram.lam[z, zp]
                        else:
                            vid = var_table.get(_unify_key(ua, z, zp))
                            if vid is None:
                                continue
                            pairs.append((vid, -1.0))
                    expr = LinearExpr.combine(pairs, constant)
                    if not expr.terms and expr.constant == 0.0:
                        continue
                    sig_terms = tuple(sorted(expr.terms))
                    if sig_terms and sig_terms[0][1] < 0:
                        expr = expr.scale(-1.0)
                        sig_terms = tuple(sorted(expr.terms))
                    sig = (sig_terms, round(expr.constant, 12))
                    if sig in seen_rel:
                        continue
                    seen_rel.add(sig)
                    relations.append(expr)
    model.relations = relations
    return model


def lookup_moment(model: MomentModel, word: CanonicalWord, z: int, zp: int) -> int:
    """Variable id of a word's moment in block (z, z'); raises if absent."""
    if word.is_zero or word.is_identity:
        raise ValueError("constant entry, not a variable")
    vid = model.var_table.get(_unify_key(word, z, zp))
    if vid is None:
        raise KeyError(f"word {word} is not representable in the operator set")
    return vid


def prob_expr(model: MomentModel, party_outcomes: dict, party_inputs: dict, z: int) -> LinearExpr:
    """Linear expression for p(outcomes | inputs, z) on diagonal block (z, z).

    ``party_inputs[p]`` is the full input sequence of party ``p``;
    ``party_outcomes[p]`` may be a prefix, in which case the trailing outcomes
    are marginalized by explicit summation.  Parties absent from
    ``party_inputs`` are omitted (their operators sum to the identity).
    """
    shape = model.opset.shape
    if not 0 <= z < model.gram.n:
        raise ValueError(f"state index {z} out of range")
    if set(party_outcomes) - set(party_inputs):
        raise ValueError("outcomes given for a party without inputs")
    per_party_ops: list[list[SiteOperator]] = []
    for p in sorted(party_inputs):
        x = tuple(int(v) for v in party_inputs[p])
        m = shape.receivers_per_party[p]
        if len(x) != m:
            raise ValueError(f"party {p} expects {m} inputs")
        prefix = tuple(int(v) for v in party_outcomes.get(p, ()))
        if len(prefix) > m:
            raise ValueError(f"party {p} outcome prefix too long")
        tails = product(*(range(c) for c in shape.outcomes_per_receiver[p][len(prefix):]))
        per_party_ops.append([SiteOperator(p, x, prefix + t) for t in tails])
    pairs: list[tuple[int, float]] = []
    for combo in product(*per_party_ops):
        w = IDENTITY
        for op in combo:
            w = multiply(w, word_from_site(op))
        if w.is_zero:
            continue
        try:
            vid = lookup_moment(model, w, z, z)
        except KeyError:
            raise KeyError(f"probability entry needs missing word {w}") from None
        pairs.append((vid, 1.0))
    expr = LinearExpr.combine(pairs)
    model.anchors[
        (tuple(sorted((p, tuple(party_inputs[p]), tuple(party_outcomes.get(p, ())))
                      for p in party_inputs)), z)
    ] = expr
    return expr


def add_constraint(model: MomentModel, expr: LinearExpr, relation: str, rhs: float) -> MomentModel:
    """Record a linear equality/inequality over model variables."""
    if relation not in ("=", "==", ">=", "<="):
        raise ValueError(f"unknown relation {relation!r}")
    for vid, _ in expr.terms:
        if not 0 <= vid < model.n_vars:
            raise ValueError(f"variable id {vid} not in model")
    if not np.isfinite(rhs):
        raise ValueError("non-finite right-hand side")
    model.extra_constraints.append((expr, "=" if relation == "==" else relation, float(rhs)))
    return model


def _entry_coeff(entries, gi, gj, coeff):
    w = coeff if gi == gj else 0.5 * coeff
    entries.append((0, gi, gj, w) if gi <= gj else (0, gj, gi, w))


def to_sdp(model: MomentModel, objective: LinearExpr, sense: str) -> SdpProblem:
    """Emit the standard-form SDP: the moment block plus inequality slacks.

    Constants are pinned by equality rows, shared variables by entry-equality
    rows; relations and user constraints become rows over representative
    entries.  The objective must have zero constant offset (callers fold
    offsets back into reported values).
    """
    if sense not in ("max", "min"):
        raise ValueError("sense must be 'max' or 'min'")
    if objective.constant != 0.0:
        raise ValueError("objective constant offset is not expressible in standard form")
    size = model.size
    n_ineq = sum(1 for _, rel, _ in model.extra_constraints if rel in (">=", "<="))
    blocks = [size] + [1] * n_ineq
    constraints: list[tuple[list[tuple[int, int, int, float]], float]] = []

    ut = np.triu_indices(size)
    cm = model.const_mask[ut]
    for gi, gj, val in zip(ut[0][cm], ut[1][cm], model.const_value[ut][cm]):
        gi, gj = int(gi), int(gj)
        entries: list[tuple[int, int, int, float]] = []
        _entry_coeff(entries, gi, gj, 1.0)
        constraints.append((entries, float(val)))

    for vid, occs in enumerate(model.var_entries):
        rep = model.var_rep_entry[vid]
        for occ in occs:
            if occ == rep:
                continue
            entries = []
            _entry_coeff(entries, rep[0], rep[1], 1.0)
            _entry_coeff(entries, occ[0], occ[1], -1.0)
            constraints.append((entries, 0.0))

    for expr in model.relations:
        entries = []
        for vid, coeff in expr.terms:
            gi, gj = model.var_rep_entry[vid]
            _entry_coeff(entries, gi, gj, coeff)
        constraints.append((entries, -expr.constant))

    slack_blk = 0
    for expr, rel, rhs in model.extra_constraints:
        entries = []
        for vid, coeff in expr.terms:
            gi, gj = model.var_rep_entry[vid]
            _entry_coeff(entries, gi, gj, coeff)
        if rel == ">=":
            slack_blk += 1
            entries.append((slack_blk, 0, 0, -1.0))
        elif rel == "<=":
            slack_blk += 1
            entries.append((slack_blk, 0, 0, 1.0))
        constraints.append((entries, rhs - expr.constant))

    obj_entries: list[tuple[int, int, int, float]] = []
    for vid, coeff in objective.terms:
        gi, gj = model.var_rep_entry[vid]
        _entry_coeff(obj_entries, gi, gj, coeff)

    return SdpProblem(
        blocks=tuple(blocks),
        constraints=tuple((tuple(e), r) for e, r in constraints),
        objective=tuple(obj_entries),
        sense=sense,
    )
