"""Soft first-order logic over neural outputs.

Ground atoms read their truth value straight from the network:

* unary ``seg_B/seg_I/seg_O`` and ``entity_<type>`` atoms at token i read
  ``y_ent[i] @ P`` where ``P`` sums the BIO tags the predicate covers
  (``entity_person`` = B-person + I-person, ``seg_B`` = every B-tag);
* binary ``rel_<name>(X, Z)`` atoms read ``y_rel[pair, name]`` for the
  candidate pair anchored at tokens (X, Z), and 0 for unscored pairs;
* ``prev(X, Z)`` is 1 when Z == X - 1 and 0 otherwise.

Connectives are smoothed with sigmoids::

    and(v_1..v_n) = sigmoid(a0 * (sum v - n) + b0)
    or(v_1..v_n)  = sigmoid(a1 * sum v + b1)
    not(v)        = 1 - v

:func:`deep_logic` finds every substitution whose body is true under the
network's current predictions, scores each consequent with the soft body,
and averages the scores that land on the same consequent atom.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import NO_RELATION
from .rules import AUXILIARY, ENTITY, PREV, RELATION, SEGMENTATION, PredicateSchema, Rule

__all__ = [
    "GammaConfig",
    "Grounding",
    "GroundingTable",
    "LogicOutputs",
    "NeuralView",
    "deep_logic",
    "discrepancy_terms",
    "dump_groundings",
    "gamma_atom",
    "gamma_connective",
    "ground_rule",
    "rule_violations",
    "logic_consequence",
]

log = logging.getLogger(__name__)

GroundAtom = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class GammaConfig:
    a0: float = 6.0
    b0: float = 3.0
    a1: float = 6.0
    b1: float = -3.0

    def __post_init__(self):
        if self.a0 <= 0 or self.a1 <= 0:
            raise ValueError("a0 and a1 must be positive")


# ---------------------------------------------------------------------------
# neural view
# ---------------------------------------------------------------------------


class NeuralView:
    """Read-only lookup of atom values and truths for one sentence."""

    def __init__(
        self,
        entity_probs: Tensor,
        relation_probs: Tensor | None,
        anchors: Sequence[tuple[int, int]],
        tag_names: Sequence[str],
        relation_names: Sequence[str],
        schema: PredicateSchema,
        pred_tags: np.ndarray | None = None,
    ):
        self.entity_probs = entity_probs
        self.relation_probs = relation_probs
        self.m = entity_probs.shape[0]
        self.schema = schema
        self.tag_names = list(tag_names)
        self.pred_tags = np.argmax(entity_probs.data, axis=-1) if pred_tags is None else np.asarray(pred_tags)

        self.unary: dict[str, int] = {}
        cols = []
        for name, (_, cat) in schema.predicates.items():
            if cat in (SEGMENTATION, ENTITY):
                cols.append(self._tag_mask(name, cat))
                self.unary[name] = len(cols) - 1
        self.projection = np.stack(cols, axis=1) if cols else np.zeros((len(self.tag_names), 0))
        # truth of unary predicate u at token i under argmax decoding
        self.unary_true = self.projection[self.pred_tags] > 0.5
        self._unary_values: Tensor | None = None

        self.anchors = [tuple(a) for a in anchors]
        self.pair_index = {a: k for k, a in enumerate(self.anchors)}
        rel_index = {r: i for i, r in enumerate(relation_names)}
        self.rel_col: dict[str, int] = {}
        for name, (_, cat) in schema.predicates.items():
            if cat == RELATION:
                label = schema.label_of(name)
                if label in rel_index:
                    self.rel_col[name] = rel_index[label]
        if relation_probs is not None and len(self.anchors):
            self.rel_pred = np.argmax(relation_probs.data, axis=-1)
        else:
            self.rel_pred = np.zeros(0, dtype=np.intp)

    @classmethod
    def from_result(cls, result, vocab, schema: PredicateSchema) -> "NeuralView":
        return cls(
            result.entity_probs,
            result.relation_probs,
            result.anchors,
            vocab.tag_list,
            vocab.relation_list,
            schema,
            result.pred_tags,
        )

    @classmethod
    def from_gold(cls, sentence, vocab, schema: PredicateSchema) -> "NeuralView":
        """Hard 0/1 view of the gold annotation; every gold entity pair is a candidate."""
        tags = vocab.tag_ids(sentence.entity_labels)
        probs = np.zeros((len(tags), len(vocab.tags)))
        probs[np.arange(len(tags)), tags] = 1.0
        spans = [span for span, _ in sentence.entities()]
        gold = {(r.head_span, r.tail_span): r.relation for r in sentence.relations}
        pairs = [(a, b) for a in spans for b in spans if a != b]
        rel = np.zeros((len(pairs), len(vocab.relations)))
        for k, pair in enumerate(pairs):
            rel[k, vocab.relation_id(gold.get(pair, NO_RELATION))] = 1.0
        anchors = [(a[1] - 1, b[1] - 1) for a, b in pairs]
        return cls(Tensor(probs), Tensor(rel) if pairs else None, anchors, vocab.tag_list, vocab.relation_list, schema, tags)

    def _tag_mask(self, name: str, cat: str) -> np.ndarray:
        label = self.schema.label_of(name)
        mask = np.zeros(len(self.tag_names))
        for t, tag in enumerate(self.tag_names):
            if cat == SEGMENTATION:
                hit = tag == "O" if label == "O" else tag.startswith(f"{label}-")
            else:
                hit = tag in (f"B-{label}", f"I-{label}")
            mask[t] = float(hit)
        return mask

    @property
    def unary_values(self) -> Tensor:
        """(m, n_unary) soft values of every unary predicate at every token."""
        if self._unary_values is None:
            self._unary_values = self.entity_probs @ Tensor(self.projection)
        return self._unary_values

    # -- scalar access ------------------------------------------------------
    def category(self, predicate: str) -> str:
        if predicate == PREV:
            return AUXILIARY
        return self.schema.category(predicate)

    def value(self, atom: GroundAtom) -> float:
        pred, args = atom
        cat = self.category(pred)
        if cat == AUXILIARY:
            return 1.0 if args[1] == args[0] - 1 else 0.0
        if cat == RELATION:
            k = self.pair_index.get(args)
            if k is None or pred not in self.rel_col:
                return 0.0
            return float(self.relation_probs.data[k, self.rel_col[pred]])
        return float(self.entity_probs.data[args[0]] @ self.projection[:, self.unary[pred]])

    def is_true(self, atom: GroundAtom, threshold=None) -> bool:
        """Truth under argmax decoding, or ``value > threshold`` when given."""
        pred, args = atom
        cat = self.category(pred)
        if cat == AUXILIARY:
            return args[1] == args[0] - 1
        if threshold is not None:
            return self.value(atom) > threshold
        if cat == RELATION:
            k = self.pair_index.get(args)
            return k is not None and pred in self.rel_col and self.rel_pred[k] == self.rel_col[pred]
        return bool(self.unary_true[args[0], self.unary[pred]])

    def has_counterpart(self, atom: GroundAtom) -> bool:
        pred, args = atom
        if self.category(pred) == RELATION:
            return args in self.pair_index and pred in self.rel_col
        return 0 <= args[0] < self.m

    def flat_index(self, atom: GroundAtom) -> int:
        """Position of ``atom`` in the vector built by :meth:`flat_values`."""
        pred, args = atom
        cat = self.category(pred)
        n_unary = self.m * len(self.unary)
        if cat == AUXILIARY:
            n_rel = self.relation_probs.size if self.relation_probs is not None else 0
            return n_unary + n_rel + (0 if args[1] == args[0] - 1 else 1)
        if cat == RELATION:
            k = self.pair_index.get(args)
            if k is None or pred not in self.rel_col:
                n_rel = self.relation_probs.size if self.relation_probs is not None else 0
                return n_unary + n_rel + 1
            return n_unary + k * self.relation_probs.shape[1] + self.rel_col[pred]
        return args[0] * len(self.unary) + self.unary[pred]

    def flat_values(self) -> Tensor:
        """Every atom value in one vector, ending with the constants 1 and 0."""
        parts = [ad.reshape(self.unary_values, (-1,))]
        if self.relation_probs is not None:
            parts.append(ad.reshape(self.relation_probs, (-1,)))
        parts.append(Tensor([1.0, 0.0]))
        return ad.concat(parts)


# ---------------------------------------------------------------------------
# scalar mappings
# ---------------------------------------------------------------------------


def gamma_atom(atom: GroundAtom, view: NeuralView) -> Tensor:
    """Differentiable value of a ground atom (0/1 constant for ``prev``)."""
    pred, args = atom
    cat = view.category(pred)
    if cat == AUXILIARY:
        return Tensor(view.value(atom))
    if cat == RELATION:
        k = view.pair_index.get(args)
        if k is None or pred not in view.rel_col:
            return Tensor(0.0)
        return ad.getitem(view.relation_probs, (k, view.rel_col[pred]))
    return ad.getitem(view.unary_values, (args[0], view.unary[pred]))


def gamma_connective(kind: str, values: Sequence, config: GammaConfig = GammaConfig()) -> Tensor:
    """Soft ``and``/``or``/``not`` over scalar tensors (or floats)."""
    vals = [v if isinstance(v, Tensor) else Tensor(float(v)) for v in values]
    if kind == "not":
        if len(vals) != 1:
            raise ValueError(f"'not' takes exactly one value, got {len(vals)}")
        return 1.0 - vals[0]
    if not vals:
        raise ValueError(f"{kind!r} needs at least one value")
    total = ad.stack(vals).sum()
    if kind == "and":
        return ad.sigmoid(total * config.a0 + (config.b0 - config.a0 * len(vals)))
    if kind == "or":
        return ad.sigmoid(total * config.a1 + config.b1)
    raise ValueError(f"unknown connective {kind!r}")


# ---------------------------------------------------------------------------
# grounding
# ---------------------------------------------------------------------------


@dataclass
class Grounding:
    rule_id: int
    substitution: dict[str, int]
    head: GroundAtom
    # ground literals as (atom, negated), grouped like the rule body
    body: list[list[tuple[GroundAtom, bool]]]


def _resolve(term_name: str, subst: dict[str, int]) -> int:
    if term_name[:1].isupper():
        return subst[term_name]
    if term_name.startswith("w") and term_name[1:].isdigit():
        return int(term_name[1:])
    raise ValueError(f"constant {term_name!r} does not name a token (use w<index>)")


def _ground_atom(atom, subst) -> GroundAtom:
    return atom.predicate, tuple(_resolve(t.name, subst) for t in atom.args)


def _facts(pred: str, view: NeuralView, threshold) -> list[tuple[int, ...]]:
    """Every argument tuple for which ``pred`` is true."""
    cat = view.category(pred)
    if cat == AUXILIARY:
        return [(x, x - 1) for x in range(1, view.m)]
    if cat == RELATION:
        if pred not in view.rel_col or view.relation_probs is None:
            return []
        col = view.rel_col[pred]
        if threshold is None:
            return [a for k, a in enumerate(view.anchors) if view.rel_pred[k] == col]
        probs = view.relation_probs.data
        return [a for k, a in enumerate(view.anchors) if probs[k, col] > threshold]
    u = view.unary[pred]
    if threshold is None:
        return [(i,) for i in np.flatnonzero(view.unary_true[:, u]).tolist()]
    vals = view.entity_probs.data @ view.projection[:, u]
    return [(i,) for i in np.flatnonzero(vals > threshold).tolist()]


def ground_rule(rule: Rule, view: NeuralView, threshold_mode="argmax") -> list[Grounding]:
    """Substitutions (variables -> token positions) that make the body true.

    ``threshold_mode`` is ``"argmax"`` (an atom is true when its label is the
    argmax of the relevant distribution) or a float ``tau`` (true when the
    atom's value exceeds ``tau``).
    """
    threshold = None if threshold_mode == "argmax" else float(threshold_mode)
    for atom in [lit.atom for lit in rule.literals] + [rule.head]:
        for t in atom.args:
            # a constant naming a token past the sentence end: nothing to ground
            if not t.is_variable and not 0 <= _resolve(t.name, {}) < view.m:
                return []
    positives = [g[0].atom for g in rule.body if len(g) == 1 and not g[0].negated]
    # seed the join with the most selective positive atoms
    fact_lists = [(atom, _facts(atom.predicate, view, threshold)) for atom in positives]
    fact_lists.sort(key=lambda af: len(af[1]))

    partial: list[dict[str, int]] = [{}]
    for atom, facts in fact_lists:
        extended = []
        for subst in partial:
            for fact in facts:
                new = dict(subst)
                ok = True
                for term, value in zip(atom.args, fact):
                    if term.is_variable:
                        bound = new.get(term.name)
                        if bound is None:
                            new[term.name] = value
                        elif bound != value:
                            ok = False
                            break
                    elif _resolve(term.name, new) != value:
                        ok = False
                        break
                if ok:
                    extended.append(new)
        partial = extended
        if not partial:
            return []

    free = [v for v in rule.body_variables() if v not in partial[0]] if partial else []
    if free:
        partial = [
            {**subst, **dict(zip(free, combo))}
            for subst in partial
            for combo in itertools.product(range(view.m), repeat=len(free))
        ]

    groundings = []
    for subst in partial:
        body = [[(_ground_atom(lit.atom, subst), lit.negated) for lit in group] for group in rule.body]
        if not all(any(view.is_true(a, threshold) != neg for a, neg in group) for group in body):
            continue
        head = _ground_atom(rule.head, subst)
        groundings.append(Grounding(rule.id, subst, head, body))
    groundings.sort(key=lambda g: tuple(g.substitution[v] for v in sorted(g.substitution)))
    return groundings


def logic_consequence(grounding: Grounding, view: NeuralView, config: GammaConfig = GammaConfig()) -> Tensor:
    """Soft value of the consequent: the smoothed ``and`` over the body."""
    conjuncts = []
    for group in grounding.body:
        lits = [gamma_atom(a, view) if not neg else gamma_connective("not", [gamma_atom(a, view)], config)
                for a, neg in group]
        conjuncts.append(lits[0] if len(lits) == 1 else gamma_connective("or", lits, config))
    return gamma_connective("and", conjuncts, config)


# ---------------------------------------------------------------------------
# Algorithm: deep logic
# ---------------------------------------------------------------------------


@dataclass
class GroundingTable:
    """Per rule: consequent atoms of every grounding and their soft values."""

    consequents: list[list[GroundAtom]]
    values: list[list[float]]
    groundings: list[list[Grounding]]

    def __len__(self) -> int:
        return len(self.consequents)


@dataclass
class LogicOutputs:
    """Averaged consequent values, one entry per (rule, consequent atom).

    ``u``/``y`` are aligned 1-D tensors: logic value and neural value of the
    consequent.  ``counts[h]`` is how many groundings produced entry h and
    ``rule_sizes[k]`` is the number of groundings of rule k.
    """

    n_rules: int
    rule_of: np.ndarray
    heads: list[GroundAtom]
    counts: np.ndarray
    rule_sizes: np.ndarray
    u: Tensor | None
    y: Tensor | None
    table: GroundingTable
    m: int
    n_pairs: int
    skipped: int = 0

    @property
    def fired(self) -> bool:
        return len(self.heads) > 0

    def _dense(self, want_pairs: bool, anchors: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
        rows = self.n_pairs if want_pairs else self.m
        out = np.full((rows, self.n_rules), np.nan)
        index = {a: k for k, a in enumerate(anchors or [])}
        for h, (pred, args) in enumerate(self.heads):
            if want_pairs and len(args) == 2:
                out[index[args], self.rule_of[h]] = self.u.data[h]
            elif not want_pairs and len(args) == 1:
                out[args[0], self.rule_of[h]] = self.u.data[h]
        return out

    def u_entity(self) -> np.ndarray:
        """(m, K) word-level logic outputs; NaN where no rule fired."""
        return self._dense(False)

    def u_relation(self, anchors: Sequence[tuple[int, int]]) -> np.ndarray:
        """(pairs, K) relation-level logic outputs; NaN where no rule fired."""
        return self._dense(True, anchors)

    def fired_mask(self) -> np.ndarray:
        return ~np.isnan(self.u_entity())


def deep_logic(
    rules: Sequence[Rule],
    view: NeuralView,
    config: GammaConfig = GammaConfig(),
    threshold_mode="argmax",
) -> LogicOutputs:
    """Ground every rule, score consequents, and average them per atom.

    Vectorized over all groundings of all rules so that the graph stays a
    few dozen nodes regardless of how many groundings fire.
    """
    consequents: list[list[GroundAtom]] = []
    table_groundings: list[list[Grounding]] = []
    skipped = 0
    for rule in rules:
        kept = []
        for g in ground_rule(rule, view, threshold_mode):
            if view.has_counterpart(g.head):
                kept.append(g)
            else:
                skipped += 1
        table_groundings.append(kept)
        consequents.append([g.head for g in kept])
    if skipped:
        log.debug("skipped %d consequents without a neural counterpart", skipped)

    K = len(rules)
    all_groundings = [g for gs in table_groundings for g in gs]
    rule_sizes = np.array([len(gs) for gs in table_groundings], dtype=np.intp)
    n_pairs = len(view.anchors)
    if not all_groundings:
        table = GroundingTable(consequents, [[] for _ in rules], table_groundings)
        return LogicOutputs(K, np.zeros(0, np.intp), [], np.zeros(0), rule_sizes, None, None, table, view.m, n_pairs, skipped)

    # literal -> group -> grounding layout
    lit_index, lit_neg, lit_group = [], [], []
    group_size, group_of = [], []
    conj_size = []
    head_key: dict[tuple[int, GroundAtom], int] = {}
    grounding_head = []
    for gi, g in enumerate(all_groundings):
        conj_size.append(len(g.body))
        for group in g.body:
            gid = len(group_size)
            group_size.append(len(group))
            group_of.append(gi)
            for atom, neg in group:
                lit_index.append(view.flat_index(atom))
                lit_neg.append(1.0 if neg else 0.0)
                lit_group.append(gid)
        key = (g.rule_id, g.head)
        grounding_head.append(head_key.setdefault(key, len(head_key)))

    flat = view.flat_values()
    neg = np.array(lit_neg)
    lit = ad.getitem(flat, np.array(lit_index, dtype=np.intp)) * (1.0 - 2.0 * neg) + neg
    n_groups = len(group_size)
    gsum = ad.segment_sum(lit, lit_group, n_groups)
    is_or = np.array(group_size) > 1
    if is_or.any():
        gor = ad.sigmoid(gsum * config.a1 + config.b1)
        gval = gor * is_or.astype(float) + gsum * (~is_or).astype(float)
    else:
        gval = gsum
    csum = ad.segment_sum(gval, group_of, len(all_groundings))
    n = np.array(conj_size, dtype=float)
    values = ad.sigmoid(csum * config.a0 + (config.b0 - config.a0 * n))

    n_heads = len(head_key)
    counts = np.bincount(grounding_head, minlength=n_heads).astype(float)
    u = ad.segment_sum(values, grounding_head, n_heads) * (1.0 / counts)
    heads = [None] * n_heads
    rule_of = np.empty(n_heads, dtype=np.intp)
    for (rid, atom), h in head_key.items():
        heads[h] = atom
        rule_of[h] = rid
    rule_pos = {rule.id: k for k, rule in enumerate(rules)}
    rule_of = np.array([rule_pos[r] for r in rule_of], dtype=np.intp)
    y = ad.getitem(flat, np.array([view.flat_index(a) for a in heads], dtype=np.intp))

    vals = values.data.tolist()
    per_rule_vals, start = [], 0
    for gs in table_groundings:
        per_rule_vals.append(vals[start:start + len(gs)])
        start += len(gs)
    table = GroundingTable(consequents, per_rule_vals, table_groundings)
    return LogicOutputs(K, rule_of, heads, counts, rule_sizes, u, y, table, view.m, n_pairs, skipped)


def discrepancy_terms(logic: LogicOutputs, rules: Sequence[Rule]) -> Tensor | None:
    """Rule-weighted squared gaps ``(1/K)(1/|Phi_k|) * count * beta_k * (y - u)^2``.

    Each consequent entry appears once per grounding that produced it, so it
    is weighted by its count.  Returns the summed loss, or None when nothing
    fired.
    """
    if not logic.fired:
        return None
    betas = ad.sigmoid(ad.stack([r.weight_raw for r in rules]))
    beta = ad.getitem(betas, logic.rule_of)
    scale = logic.counts / (logic.n_rules * logic.rule_sizes[logic.rule_of])
    gap = ad.square(logic.y - logic.u)
    return (beta * gap * scale).sum()


def dump_groundings(
    logic: LogicOutputs, view: NeuralView, out: TextIO, sentence_id: str = "", config: GammaConfig = GammaConfig()
) -> None:
    """Write one line per grounding: rule, substitution, body values, value."""
    for k, groundings in enumerate(logic.table.groundings):
        for g, value in zip(groundings, logic.table.values[k]):
            subst = ",".join(f"{v}={p}" for v, p in sorted(g.substitution.items()))
            body = ",".join(
                f"{'!' if neg else ''}{a[0]}({','.join(map(str, a[1]))})={view.value(a):.6f}"
                for group in g.body
                for a, neg in group
            )
            head = f"{g.head[0]}({','.join(map(str, g.head[1]))})"
            out.write(f"sentence={sentence_id}\trule={g.rule_id}\tsubst={subst}\tbody={body}\thead={head}\tvalue={value:.6f}\n")


def rule_violations(rules: Sequence[Rule], view: NeuralView, threshold_mode="argmax") -> list[Grounding]:
    """Groundings whose body holds but whose head is false in ``view``."""
    threshold = None if threshold_mode == "argmax" else float(threshold_mode)
    out = []
    for rule in rules:
        for g in ground_rule(rule, view, threshold_mode):
            if not view.is_true(g.head, threshold):
                out.append(g)
    return out
