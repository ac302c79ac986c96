"""Canonical algebra of sequential-measurement operators.

A measurement party consists of a chain of receivers acting one after another
on the same system.  The full chain with inputs ``x = (x_1..x_m)`` and
outcomes ``a = (a_1..a_m)`` is represented by a single Hermitian idempotent
site operator.  Words in these operators carry three exact simplification
rules:

* idempotence / orthogonality on identical inputs,
* annihilation whenever two factors agree on an input prefix but disagree on
  an outcome inside that prefix,
* commutation of operators belonging to distinct parties.

The one-way no-signaling rule relates *sums* of operators, so it is not a
rewrite rule; it is exported as relation metadata for the moment builder.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence


@dataclass(frozen=True)
class NetworkShape:
    """Layout of a prepare-and-measure network with sequential receivers.

    ``inputs_per_receiver[p][r]`` / ``outcomes_per_receiver[p][r]`` give the
    alphabet sizes of receiver ``r`` in party ``p``; ``n_states`` is the
    number of prepared states.
    """

    parties: int
    receivers_per_party: tuple[int, ...]
    inputs_per_receiver: tuple[tuple[int, ...], ...]
    outcomes_per_receiver: tuple[tuple[int, ...], ...]
    n_states: int

    def __post_init__(self):
        object.__setattr__(self, "receivers_per_party", tuple(self.receivers_per_party))
        object.__setattr__(
            self, "inputs_per_receiver", tuple(tuple(v) for v in self.inputs_per_receiver)
        )
        object.__setattr__(
            self, "outcomes_per_receiver", tuple(tuple(v) for v in self.outcomes_per_receiver)
        )
        if self.parties < 1:
            raise ValueError("need at least one party")
        if self.n_states < 1:
            raise ValueError("need at least one prepared state")
        for name, per_party in (
            ("receivers_per_party", self.receivers_per_party),
            ("inputs_per_receiver", self.inputs_per_receiver),
            ("outcomes_per_receiver", self.outcomes_per_receiver),
        ):
            if len(per_party) != self.parties:
                raise ValueError(f"{name} must have length {self.parties}")
        for p in range(self.parties):
            m = self.receivers_per_party[p]
            if m < 1:
                raise ValueError(f"party {p} needs at least one receiver")
            for name, counts in (
                ("inputs", self.inputs_per_receiver[p]),
                ("outcomes", self.outcomes_per_receiver[p]),
            ):
                if len(counts) != m:
                    raise ValueError(f"party {p}: {name} list must have length {m}")
                if any(c < 1 for c in counts):
                    raise ValueError(f"party {p}: all {name} counts must be >= 1")

    def input_choices(self, party: int) -> Iterable[tuple[int, ...]]:
        return product(*(range(c) for c in self.inputs_per_receiver[party]))

    def outcome_choices(self, party: int) -> Iterable[tuple[int, ...]]:
        return product(*(range(c) for c in self.outcomes_per_receiver[party]))


def one_chain_qrac_shape(n_states: int = 4) -> NetworkShape:
    """One party, two sequential receivers, binary inputs/outcomes."""
    return NetworkShape(
        parties=1,
        receivers_per_party=(2,),
        inputs_per_receiver=((2, 2),),
        outcomes_per_receiver=((2, 2),),
        n_states=n_states,
    )


@dataclass(frozen=True)
class SiteOperator:
    """One full sequential chain operator of a single party."""

    party: int
    inputs: tuple[int, ...]
    outcomes: tuple[int, ...]

    def key(self) -> tuple:
        return (self.party, self.inputs, self.outcomes)


def make_site_operator(
    shape: NetworkShape, party: int, inputs: Sequence[int], outcomes: Sequence[int]
) -> SiteOperator:
    """Validate symbol ranges and build a site operator."""
    if not 0 <= party < shape.parties:
        raise ValueError(f"party {party} out of range (0..{shape.parties - 1})")
    inputs = tuple(int(v) for v in inputs)
    outcomes = tuple(int(v) for v in outcomes)
    m = shape.receivers_per_party[party]
    if len(inputs) != m:
        raise ValueError(f"party {party} expects {m} inputs, got {len(inputs)}")
    if len(outcomes) != m:
        raise ValueError(f"party {party} expects {m} outcomes, got {len(outcomes)}")
    for r, (x, nx) in enumerate(zip(inputs, shape.inputs_per_receiver[party])):
        if not 0 <= x < nx:
            raise ValueError(f"input symbol {x} out of range at receiver {r} of party {party}")
    for r, (a, na) in enumerate(zip(outcomes, shape.outcomes_per_receiver[party])):
        if not 0 <= a < na:
            raise ValueError(f"outcome symbol {a} out of range at receiver {r} of party {party}")
    return SiteOperator(party, inputs, outcomes)


class CanonicalWord:
    """A fully simplified product of site operators, or the zero element.

    Factors are stored per party in ascending party order (cross-party
    commutation as normal form); within a party no adjacent pair is reducible.
    Two mathematically equal words compare equal and hash alike.
    """

    __slots__ = ("factors", "is_zero", "_key")

    def __init__(self, factors: tuple[SiteOperator, ...] = (), is_zero: bool = False):
        self.factors = () if is_zero else tuple(factors)
        self.is_zero = bool(is_zero)
        self._key = ("ZERO",) if is_zero else tuple(f.key() for f in self.factors)

    def key(self) -> tuple:
        """Deterministic total-order key; equal words have equal keys."""
        return self._key

    @property
    def is_identity(self) -> bool:
        return not self.is_zero and not self.factors

    def parties(self) -> set[int]:
        return {f.party for f in self.factors}

    def __eq__(self, other):
        return isinstance(other, CanonicalWord) and self._key == other._key

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        if self.is_zero:
            return "Word(0)"
        if self.is_identity:
            return "Word(I)"
        parts = [
            "P{}[{}|{}]".format(
                f.party,
                "".join(map(str, f.outcomes)),
                "".join(map(str, f.inputs)),
            )
            for f in self.factors
        ]
        return "Word(" + "*".join(parts) + ")"


ZERO = CanonicalWord(is_zero=True)
IDENTITY = CanonicalWord()


def word_from_site(op: SiteOperator) -> CanonicalWord:
    return CanonicalWord((op,))


def _reduce_pair(a: SiteOperator, b: SiteOperator):
    """Simplify the adjacent same-party product a*b.

    Returns ``None`` if irreducible, ``"zero"`` if the product vanishes, or
    the surviving single factor.
    """
    if a.inputs == b.inputs:
        return a if a.outcomes == b.outcomes else "zero"
    # longest common input prefix
    k = 0
    for xa, xb in zip(a.inputs, b.inputs):
        if xa != xb:
            break
        k += 1
    if k > 0 and a.outcomes[:k] != b.outcomes[:k]:
        return "zero"
    return None


def multiply(lhs: CanonicalWord, rhs: CanonicalWord) -> CanonicalWord:
    """Canonical product of two words (zero is absorbing)."""
    if lhs.is_zero or rhs.is_zero:
        return ZERO
    parties = sorted({f.party for f in lhs.factors} | {f.party for f in rhs.factors})
    out: list[SiteOperator] = []
    for p in parties:
        stack: list[SiteOperator] = []
        for f in (g for g in lhs.factors if g.party == p):
            stack.append(f)
        for f in (g for g in rhs.factors if g.party == p):
            while True:
                if not stack:
                    stack.append(f)
                    break
                red = _reduce_pair(stack[-1], f)
                if red is None:
                    stack.append(f)
                    break
                if red == "zero":
                    return ZERO
                # idempotent merge: retry against the new top
                f = stack.pop()
                f = red
        out.extend(stack)
    return CanonicalWord(tuple(out))


def adjoint(w: CanonicalWord) -> CanonicalWord:
    """Reverse each party's factor list (site operators are self-adjoint)."""
    if w.is_zero or w.is_identity:
        return w
    parties = sorted({f.party for f in w.factors})
    out: list[SiteOperator] = []
    for p in parties:
        out.extend(reversed([f for f in w.factors if f.party == p]))
    return CanonicalWord(tuple(out))


@dataclass(frozen=True)
class NoSignalingRelation:
    """One linear operator identity Σ lhs_family = Σ rhs_family.

    ``prefix_len = 0`` marks a normalization family whose right-hand side is
    the identity operator (``rhs_family`` is then empty).
    """

    party: int
    prefix_len: int
    prefix_inputs: tuple[int, ...]
    prefix_outcomes: tuple[int, ...]
    lhs_tail_inputs: tuple[int, ...]
    rhs_tail_inputs: tuple[int, ...] | None
    lhs_family: tuple[SiteOperator, ...]
    rhs_family: tuple[SiteOperator, ...]

    @property
    def rhs_is_identity(self) -> bool:
        return self.prefix_len == 0


def nosignaling_relations(shape: NetworkShape) -> list[NoSignalingRelation]:
    """Enumerate the one-way no-signaling sum identities of every party.

    For each party with ``m`` receivers: the normalization families
    Σ_a A_x^a = I for every full input x, and for every 1 <= k <= m-1, every
    fixed prefix (x_1..x_k, a_1..a_k) and every unordered pair of distinct
    trailing-input assignments, the equality of the two outcome-summed
    families.
    """
    rels: list[NoSignalingRelation] = []
    for p in range(shape.parties):
        m = shape.receivers_per_party[p]
        in_counts = shape.inputs_per_receiver[p]
        out_counts = shape.outcomes_per_receiver[p]
        for x in shape.input_choices(p):
            family = tuple(SiteOperator(p, x, a) for a in shape.outcome_choices(p))
            rels.append(
                NoSignalingRelation(
                    party=p,
                    prefix_len=0,
                    prefix_inputs=(),
                    prefix_outcomes=(),
                    lhs_tail_inputs=x,
                    rhs_tail_inputs=None,
                    lhs_family=family,
                    rhs_family=(),
                )
            )
        for k in range(1, m):
            tails = list(product(*(range(c) for c in in_counts[k:])))
            tail_outs = list(product(*(range(c) for c in out_counts[k:])))
            for xp in product(*(range(c) for c in in_counts[:k])):
                for ap in product(*(range(c) for c in out_counts[:k])):
                    for i in range(len(tails)):
                        for j in range(i + 1, len(tails)):
                            fam_i = tuple(
                                SiteOperator(p, xp + tails[i], ap + ao) for ao in tail_outs
                            )
                            fam_j = tuple(
                                SiteOperator(p, xp + tails[j], ap + ao) for ao in tail_outs
                            )
                            rels.append(
                                NoSignalingRelation(
                                    party=p,
                                    prefix_len=k,
                                    prefix_inputs=xp,
                                    prefix_outcomes=ap,
                                    lhs_tail_inputs=tails[i],
                                    rhs_tail_inputs=tails[j],
                                    lhs_family=fam_i,
                                    rhs_family=fam_j,
                                )
                            )
    return rels
